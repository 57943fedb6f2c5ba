//! Per-class affine colour student, its gradient-descent fit and the
//! synthetic affine teacher used to exercise it.

use super::{DistillError, PairDataset};
use crate::augment::server::{AugmentBackend, BackendOutput, BackendRequest};
use crate::augment::{AugmentError, AugmentParams, AugmentationResult, Augmenter};
use crate::exec::Exec;
use crate::image::{ClassId, Image, Rgb};
use crate::palette::{segment_palette_with, Palette};
use crate::rng;
use crate::sim::render::Frame;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

/// `out = M·rgb + b` on [0, 1] channels. Serialized as the 9 row-major
/// entries of `M` followed by `b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 12]", into = "[f64; 12]")]
pub struct ClassMap {
    pub m: [[f64; 3]; 3],
    pub b: [f64; 3],
}

impl ClassMap {
    pub const IDENTITY: ClassMap = ClassMap {
        m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        b: [0.0; 3],
    };

    pub fn constant(c: Rgb) -> ClassMap {
        ClassMap {
            m: [[0.0; 3]; 3],
            b: c.map(|v| v as f64 / 255.0),
        }
    }

    #[inline]
    pub fn apply_f(&self, x: [f64; 3]) -> [f64; 3] {
        let mut y = self.b;
        for (i, yi) in y.iter_mut().enumerate() {
            *yi += self.m[i][0] * x[0] + self.m[i][1] * x[1] + self.m[i][2] * x[2];
        }
        y
    }

    #[inline]
    pub fn apply(&self, px: Rgb) -> Rgb {
        let y = self.apply_f(px.map(|v| v as f64 / 255.0));
        y.map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
    }

    pub fn coefficients(&self) -> [f64; 12] {
        (*self).into()
    }

    pub fn is_finite(&self) -> bool {
        self.coefficients().iter().all(|v| v.is_finite())
    }

    fn max_abs_diff(&self, other: &ClassMap) -> f64 {
        let (a, b) = (self.coefficients(), other.coefficients());
        a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }
}

impl From<[f64; 12]> for ClassMap {
    fn from(c: [f64; 12]) -> Self {
        ClassMap {
            m: [[c[0], c[1], c[2]], [c[3], c[4], c[5]], [c[6], c[7], c[8]]],
            b: [c[9], c[10], c[11]],
        }
    }
}

impl From<ClassMap> for [f64; 12] {
    fn from(c: ClassMap) -> Self {
        let m = c.m;
        [
            m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2], c.b[0],
            c.b[1], c.b[2],
        ]
    }
}

/// Classes are found by palette segmentation of the input; a class without
/// a map passes through unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentTransform {
    pub palette: Palette,
    pub classes: BTreeMap<ClassId, ClassMap>,
}

impl StudentTransform {
    pub fn identity(palette: Palette) -> Self {
        let classes = palette.classes().into_iter().map(|c| (c, ClassMap::IDENTITY)).collect();
        StudentTransform { palette, classes }
    }

    pub fn validate(&self) -> Result<(), DistillError> {
        match self.classes.iter().find(|(_, m)| !m.is_finite()) {
            Some((c, _)) => Err(DistillError::InvalidStudent(format!("non-finite map for {c}"))),
            None => Ok(()),
        }
    }

    fn table(&self) -> [ClassMap; 256] {
        let mut t = [ClassMap::IDENTITY; 256];
        for (c, m) in &self.classes {
            t[c.index()] = *m;
        }
        t
    }

    pub fn apply(&self, image: &Image) -> Image {
        self.apply_with(image, Exec::default())
    }

    pub fn apply_with(&self, image: &Image, exec: Exec) -> Image {
        let mask = segment_palette_with(image, &self.palette, exec);
        let table = self.table();
        let (w, _) = image.dims();
        let src = image.pixels();
        let classes = mask.classes();
        let mut out = vec![0u8; src.len()];
        exec.for_rows(&mut out, w * 3, |y, row| {
            // Frames are mostly flat colour; reuse the last result.
            let mut last: Option<(u8, Rgb, Rgb)> = None;
            for x in 0..w {
                let i = y * w + x;
                let px = [src[3 * i], src[3 * i + 1], src[3 * i + 2]];
                let c = classes[i];
                let o = match last {
                    Some((lc, lp, lo)) if lc == c && lp == px => lo,
                    _ => {
                        let o = table[c as usize].apply(px);
                        last = Some((c, px, o));
                        o
                    }
                };
                row[3 * x..3 * x + 3].copy_from_slice(&o);
            }
        });
        Image::new(image.width(), image.height(), out).expect("same dims")
    }

    pub fn max_coefficient_diff(&self, other: &StudentTransform) -> f64 {
        let keys: std::collections::BTreeSet<_> = self.classes.keys().chain(other.classes.keys()).collect();
        keys.into_iter()
            .map(|c| {
                let a = self.classes.get(c).unwrap_or(&ClassMap::IDENTITY);
                let b = other.classes.get(c).unwrap_or(&ClassMap::IDENTITY);
                a.max_abs_diff(b)
            })
            .fold(0.0, f64::max)
    }
}

/// Student output for `image`, plus wall time in ms.
pub fn apply_student(student: &StudentTransform, image: &Image) -> (Image, f64) {
    let t = Instant::now();
    let out = student.apply(image);
    (out, t.elapsed().as_secs_f64() * 1e3)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub epoch: usize,
    pub mse: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fd_to_teacher: Option<f64>,
    pub student: StudentTransform,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), DistillError> {
        let text = serde_json::to_string_pretty(self).expect("checkpoint serializes");
        std::fs::write(path, text).map_err(|source| DistillError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Checkpoint, DistillError> {
        let text = std::fs::read_to_string(path).map_err(|source| DistillError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let ck: Checkpoint =
            serde_json::from_str(&text).map_err(|e| DistillError::Checkpoint(e.to_string()))?;
        ck.student.validate()?;
        Ok(ck)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Total learning-rate halvings allowed over the whole fit.
    pub max_halvings: u32,
    /// Allowed MSE rise between epochs before an epoch is redone.
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            epochs: 10,
            batch_size: 32,
            learning_rate: 1e-3,
            max_halvings: 3,
            tolerance: 1e-6,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<(), DistillError> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(DistillError::InvalidConfig("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(DistillError::InvalidConfig("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

struct Prepared<'a> {
    pairs: &'a [(Image, Image)],
    classes: Vec<Vec<u8>>,
}

#[inline]
fn norm(p: &[u8], i: usize) -> [f64; 3] {
    [p[3 * i] as f64 / 255.0, p[3 * i + 1] as f64 / 255.0, p[3 * i + 2] as f64 / 255.0]
}

fn mse(prep: &Prepared, table: &[ClassMap; 256], exec: Exec) -> f64 {
    let per = exec.map_range(prep.pairs.len(), |k| {
        let (orig, aug) = &prep.pairs[k];
        let (xs, ys) = (orig.pixels(), aug.pixels());
        let mut acc = 0.0;
        for (i, &c) in prep.classes[k].iter().enumerate() {
            let p = table[c as usize].apply_f(norm(xs, i));
            let t = norm(ys, i);
            acc += (p[0] - t[0]).powi(2) + (p[1] - t[1]).powi(2) + (p[2] - t[2]).powi(2);
        }
        (acc, orig.pixel_count())
    });
    let (sum, n) = per.iter().fold((0.0, 0usize), |a, b| (a.0 + b.0, a.1 + b.1));
    sum / (3 * n) as f64
}

/// One shuffled pass of mini-batch gradient descent. Loss per batch is the
/// mean over its pixels of the squared colour error summed over channels.
fn epoch_pass(prep: &Prepared, table: &mut [ClassMap; 256], lr: f64, batch: usize, seed: u64) {
    let mut r = rng::rng(seed);
    let mut order: Vec<usize> = (0..prep.pairs.len()).collect();
    order.shuffle(&mut r);
    let mut idx: Vec<u32> = Vec::new();
    let mut grad = [[0.0f64; 12]; 256];
    let mut touched: Vec<u8> = Vec::with_capacity(8);
    for k in order {
        let (orig, aug) = &prep.pairs[k];
        let (xs, ys) = (orig.pixels(), aug.pixels());
        let classes = &prep.classes[k];
        idx.clear();
        idx.extend(0..orig.pixel_count() as u32);
        idx.shuffle(&mut r);
        for chunk in idx.chunks(batch) {
            let scale = 2.0 / chunk.len() as f64;
            for &i in chunk {
                let i = i as usize;
                let c = classes[i] as usize;
                let x = norm(xs, i);
                let t = norm(ys, i);
                let p = table[c].apply_f(x);
                let g = &mut grad[c];
                if !touched.contains(&(c as u8)) {
                    touched.push(c as u8);
                }
                for ch in 0..3 {
                    let e = p[ch] - t[ch];
                    g[3 * ch] += e * x[0];
                    g[3 * ch + 1] += e * x[1];
                    g[3 * ch + 2] += e * x[2];
                    g[9 + ch] += e;
                }
            }
            for &c in &touched {
                let c = c as usize;
                let mut coef = table[c].coefficients();
                for (w, g) in coef.iter_mut().zip(grad[c].iter_mut()) {
                    *w -= lr * scale * *g;
                    *g = 0.0;
                }
                table[c] = ClassMap::from(coef);
            }
            touched.clear();
        }
    }
}

/// Fit from the identity map, one checkpoint per epoch.
pub fn fit_student(
    data: &PairDataset,
    palette: &Palette,
    cfg: &FitConfig,
    exec: Exec,
) -> Result<Vec<Checkpoint>, DistillError> {
    cfg.validate()?;
    if data.pairs.is_empty() {
        return Err(DistillError::Empty("pair dataset"));
    }
    let classes = exec.map(&data.pairs, |(orig, _)| {
        segment_palette_with(orig, palette, Exec::Sequential).classes().to_vec()
    });
    let prep = Prepared {
        pairs: &data.pairs,
        classes,
    };
    let present: std::collections::BTreeSet<u8> =
        prep.classes.iter().flat_map(|c| c.iter().copied()).collect();

    let mut table = [ClassMap::IDENTITY; 256];
    let mut lr = cfg.learning_rate;
    let mut halvings = 0;
    let mut prev = mse(&prep, &table, exec);
    let mut out = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let before = table;
        let mut attempt = 0u64;
        let current = loop {
            epoch_pass(&prep, &mut table, lr, cfg.batch_size, rng::derive(cfg.seed, epoch as u64 * 16 + attempt));
            let m = mse(&prep, &table, exec);
            if m <= prev + cfg.tolerance {
                break m;
            }
            table = before;
            if halvings >= cfg.max_halvings {
                log::warn!("epoch {epoch}: mse rose to {m:e}; keeping previous parameters");
                break prev;
            }
            halvings += 1;
            attempt += 1;
            lr *= 0.5;
            log::debug!("epoch {epoch}: mse rose to {m:e}; learning rate now {lr:e}");
        };
        prev = current;
        let student = StudentTransform {
            palette: palette.clone(),
            classes: palette
                .classes()
                .into_iter()
                .filter(|c| present.contains(&c.0))
                .map(|c| (c, table[c.index()]))
                .collect(),
        };
        student.validate()?;
        out.push(Checkpoint {
            epoch,
            mse: current,
            fd_to_teacher: None,
            student,
        });
    }
    Ok(out)
}

/// Slow-backend stand-in: an exact per-class affine map keyed by the ground
/// truth masks that travel with each request.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineTeacher {
    pub classes: BTreeMap<ClassId, ClassMap>,
}

impl AffineTeacher {
    pub fn new(classes: BTreeMap<ClassId, ClassMap>) -> Self {
        AffineTeacher { classes }
    }

    /// Preserved classes keep their pixels; every other class goes through
    /// the domain tone.
    pub fn from_domain(domain: &crate::augment::domain::DomainSpec, palette: &Palette, preserved: &[ClassId]) -> Self {
        let classes = palette
            .classes()
            .into_iter()
            .map(|c| {
                let m = if preserved.contains(&c) {
                    ClassMap::IDENTITY
                } else {
                    let t = domain.tone;
                    ClassMap {
                        m: t.matrix,
                        b: t.offset.map(|v| v / 255.0),
                    }
                };
                (c, m)
            })
            .collect();
        AffineTeacher { classes }
    }

    pub fn apply(&self, image: &Image, mask: &crate::image::SemanticMask) -> Image {
        let mut table = [ClassMap::IDENTITY; 256];
        for (c, m) in &self.classes {
            table[c.index()] = *m;
        }
        let src = image.pixels();
        let mut out = vec![0u8; src.len()];
        for (i, &c) in mask.classes().iter().enumerate() {
            let o = table[c as usize].apply([src[3 * i], src[3 * i + 1], src[3 * i + 2]]);
            out[3 * i..3 * i + 3].copy_from_slice(&o);
        }
        Image::new(image.width(), image.height(), out).expect("same dims")
    }
}

impl AugmentBackend for AffineTeacher {
    fn augment(&self, req: &BackendRequest) -> Result<BackendOutput, AugmentError> {
        if req.masks.len() != req.images.len() {
            return Err(AugmentError::MissingMask);
        }
        let images = req.images.iter().zip(&req.masks).map(|(i, m)| self.apply(i, m)).collect();
        Ok(BackendOutput { images, gt_valid: None })
    }
}

impl Augmenter for AffineTeacher {
    fn augment(&mut self, frame: &Frame, params: &AugmentParams) -> Result<AugmentationResult, AugmentError> {
        let t = Instant::now();
        let images = frame.views.iter().map(|v| self.apply(&v.image, &v.mask)).collect();
        Ok(AugmentationResult {
            images,
            elapsed_ms: t.elapsed().as_secs_f64() * 1e3,
            server_elapsed_ms: None,
            seed_used: params.seed,
            retries: 0,
            gt_valid: None,
        })
    }

    fn label(&self) -> String {
        "affine-teacher".into()
    }
}

/// Runs a fitted student in the closed loop.
#[derive(Debug, Clone)]
pub struct StudentAugmenter {
    pub student: StudentTransform,
    pub exec: Exec,
}

impl StudentAugmenter {
    pub fn new(student: StudentTransform) -> Self {
        StudentAugmenter {
            student,
            exec: Exec::default(),
        }
    }
}

impl Augmenter for StudentAugmenter {
    fn augment(&mut self, frame: &Frame, params: &AugmentParams) -> Result<AugmentationResult, AugmentError> {
        let t = Instant::now();
        let images = frame.views.iter().map(|v| self.student.apply_with(&v.image, self.exec)).collect();
        Ok(AugmentationResult {
            images,
            elapsed_ms: t.elapsed().as_secs_f64() * 1e3,
            server_elapsed_ms: None,
            seed_used: params.seed,
            retries: 0,
            gt_valid: None,
        })
    }

    fn label(&self) -> String {
        "student".into()
    }
}

impl AugmentBackend for StudentTransform {
    fn augment(&self, req: &BackendRequest) -> Result<BackendOutput, AugmentError> {
        Ok(BackendOutput {
            images: req.images.iter().map(|i| self.apply(i)).collect(),
            gt_valid: None,
        })
    }
}
