//! Semantic validation of augmented frames.
//!
//! An augmentation is valid when, for every checked class and view, the
//! segmentation of the augmented image overlaps the original ground-truth
//! mask with an IoU of at least the threshold.

use crate::augment::{AugmentError, AugmentParams, AugmentationResult, Augmenter, DomainSpec};
use crate::exec::Exec;
use crate::image::{ClassId, Image, Rgb, SemanticMask};
use crate::palette::{segment_palette_with, Palette};
use crate::rng;
use crate::sim::Frame;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ValidatorError {
    #[error("mask dimensions differ: {0:?} vs {1:?}")]
    DimensionMismatch((usize, usize), (usize, usize)),
    #[error("frame has {frame} views but {augmented} augmented images")]
    ViewCount { frame: usize, augmented: usize },
    #[error("threshold {0} outside [0, 1]")]
    InvalidThreshold(f64),
    #[error("no classes to check")]
    NoCheckedClasses,
    #[error("calibration needs at least two masks")]
    TooFewMasks,
    #[error("calibration needs at least two categories")]
    SingleCategory,
    #[error("no samples to evaluate")]
    EmptyInput,
    #[error("segmenter failed: {0}")]
    Segmenter(String),
    #[error(transparent)]
    Augment(#[from] AugmentError),
}

/// Any `Image -> SemanticMask` model.
pub trait Segmenter: Send + Sync {
    fn segment(&self, image: &Image) -> Result<SemanticMask, ValidatorError>;
    fn name(&self) -> &str;
}

/// Nearest simulator-palette color. Exact on unaugmented frames.
#[derive(Debug, Clone)]
pub struct PaletteSegmenter {
    pub palette: Palette,
    pub exec: Exec,
}

impl Default for PaletteSegmenter {
    fn default() -> Self {
        PaletteSegmenter {
            palette: Palette::simulator(),
            exec: Exec::default(),
        }
    }
}

impl Segmenter for PaletteSegmenter {
    fn segment(&self, image: &Image) -> Result<SemanticMask, ValidatorError> {
        Ok(segment_palette_with(image, &self.palette, self.exec))
    }

    fn name(&self) -> &str {
        "palette"
    }
}

/// Segmenter adapted to one target domain: each class owns the color
/// segments from its simulator color and from its domain target to its
/// tone-mapped color, so any blend the strategies produce stays attached
/// to its source class.
#[derive(Debug, Clone)]
pub struct DomainSegmenter {
    segments: Vec<(ClassId, [f64; 3], [f64; 3])>,
    name: String,
    exec: Exec,
}

fn f3(c: Rgb) -> [f64; 3] {
    [c[0] as f64, c[1] as f64, c[2] as f64]
}

fn seg_dist2(p: [f64; 3], a: [f64; 3], b: [f64; 3]) -> f64 {
    let d = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let q = [p[0] - a[0], p[1] - a[1], p[2] - a[2]];
    let dd = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
    let t = if dd > 0.0 {
        ((q[0] * d[0] + q[1] * d[1] + q[2] * d[2]) / dd).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let r = [q[0] - t * d[0], q[1] - t * d[1], q[2] - t * d[2]];
    r[0] * r[0] + r[1] * r[1] + r[2] * r[2]
}

impl DomainSegmenter {
    pub fn new(domain: &DomainSpec, palette: &Palette) -> Self {
        let mut segments = Vec::new();
        for &(class, color) in palette.entries() {
            let toned = f3(domain.tone.apply(color));
            segments.push((class, f3(color), toned));
            segments.push((class, f3(domain.target(class)), toned));
        }
        DomainSegmenter {
            segments,
            name: format!("domain:{}", domain.name),
            exec: Exec::default(),
        }
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn classify(&self, px: Rgb) -> ClassId {
        let p = f3(px);
        let mut best = (f64::INFINITY, ClassId::BACKGROUND);
        for &(c, a, b) in &self.segments {
            let d = seg_dist2(p, a, b);
            if d < best.0 || (d == best.0 && c < best.1) {
                best = (d, c);
            }
        }
        best.1
    }
}

impl Segmenter for DomainSegmenter {
    fn segment(&self, image: &Image) -> Result<SemanticMask, ValidatorError> {
        let (w, h) = image.dims();
        let mut classes = vec![0u8; w * h];
        let px = image.pixels();
        self.exec.for_rows(&mut classes, w, |y, row| {
            // direct-mapped color cache; jittered regions repeat colors a lot
            let mut cache = vec![(u32::MAX, 0u8); 1 << 12];
            for (x, out) in row.iter_mut().enumerate() {
                let o = 3 * (y * w + x);
                let key = u32::from_be_bytes([0, px[o], px[o + 1], px[o + 2]]);
                let slot = &mut cache[(key.wrapping_mul(0x9E37_79B1) >> 20) as usize];
                if slot.0 != key {
                    *slot = (key, self.classify([px[o], px[o + 1], px[o + 2]]).0);
                }
                *out = slot.1;
            }
        });
        Ok(SemanticMask::new(w, h, classes).expect("dims come from an image"))
    }

    fn name(&self) -> &str {
        &self.name
    }
}

/// Single-class IoU; an empty union counts as perfectly preserved.
pub fn octss(a: &SemanticMask, b: &SemanticMask, class: ClassId) -> Result<f64, ValidatorError> {
    if a.dims() != b.dims() {
        return Err(ValidatorError::DimensionMismatch(a.dims(), b.dims()));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.classes().iter().zip(b.classes()) {
        let (p, q) = (x == class.0, y == class.0);
        inter += (p && q) as usize;
        union += (p || q) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

#[derive(Clone)]
pub struct ValidatorConfig {
    pub threshold: f64,
    pub checked_classes: Vec<ClassId>,
    pub max_retries: u32,
    pub segmenter: Arc<dyn Segmenter>,
}

impl fmt::Debug for ValidatorConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ValidatorConfig")
            .field("threshold", &self.threshold)
            .field("checked_classes", &self.checked_classes)
            .field("max_retries", &self.max_retries)
            .field("segmenter", &self.segmenter.name())
            .finish()
    }
}

impl Default for ValidatorConfig {
    fn default() -> Self {
        ValidatorConfig {
            threshold: 0.9,
            checked_classes: vec![ClassId::ROAD],
            max_retries: 10,
            segmenter: Arc::new(PaletteSegmenter::default()),
        }
    }
}

impl ValidatorConfig {
    pub fn urban() -> Self {
        ValidatorConfig {
            checked_classes: ClassId::URBAN_CHECKED.to_vec(),
            ..ValidatorConfig::default()
        }
    }

    pub fn with_segmenter(mut self, s: Arc<dyn Segmenter>) -> Self {
        self.segmenter = s;
        self
    }

    pub fn check(&self) -> Result<(), ValidatorError> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(ValidatorError::InvalidThreshold(self.threshold));
        }
        if self.checked_classes.is_empty() {
            return Err(ValidatorError::NoCheckedClasses);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationVerdict {
    /// Worst score over views, per checked class.
    pub per_class_score: BTreeMap<ClassId, f64>,
    /// Scores for each view separately.
    pub per_view: Vec<BTreeMap<ClassId, f64>>,
    pub valid: bool,
    pub elapsed_ms: f64,
}

impl ValidationVerdict {
    pub fn min_score(&self) -> f64 {
        self.per_class_score.values().copied().fold(1.0, f64::min)
    }
}

pub fn validate(
    original: &Frame,
    augmented: &[Image],
    cfg: &ValidatorConfig,
) -> Result<ValidationVerdict, ValidatorError> {
    cfg.check()?;
    let t = Instant::now();
    if original.views.len() != augmented.len() {
        return Err(ValidatorError::ViewCount {
            frame: original.views.len(),
            augmented: augmented.len(),
        });
    }
    let mut per_class: BTreeMap<ClassId, f64> = BTreeMap::new();
    let mut per_view = Vec::with_capacity(augmented.len());
    for (view, img) in original.views.iter().zip(augmented) {
        if view.image.dims() != img.dims() {
            return Err(ValidatorError::DimensionMismatch(view.image.dims(), img.dims()));
        }
        let seg = cfg.segmenter.segment(img)?;
        let mut scores = BTreeMap::new();
        for &c in &cfg.checked_classes {
            let s = octss(&view.mask, &seg, c)?;
            scores.insert(c, s);
            let e = per_class.entry(c).or_insert(1.0);
            *e = e.min(s);
        }
        per_view.push(scores);
    }
    let valid = per_class.values().all(|&s| s >= cfg.threshold);
    Ok(ValidationVerdict {
        per_class_score: per_class,
        per_view,
        valid,
        elapsed_ms: t.elapsed().as_secs_f64() * 1e3,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Attempt {
    pub seed: u64,
    pub augment_ms: f64,
    pub validate_ms: f64,
    pub valid: bool,
    pub gt_valid: Option<bool>,
}

#[derive(Debug, Clone)]
pub struct ValidatedAugmentation {
    /// Accepted augmentation, or the original views on fallback.
    pub result: AugmentationResult,
    pub verdict: ValidationVerdict,
    pub retries: u32,
    pub fallback: bool,
    pub attempts: Vec<Attempt>,
    pub augment_ms: f64,
    pub validate_ms: f64,
    /// Wall time of the whole loop.
    pub total_ms: f64,
}

/// Seed for attempt `k`: the caller's seed first, then derived ones.
pub fn retry_seed(seed: u64, attempt: u32) -> u64 {
    if attempt == 0 {
        seed
    } else {
        rng::derive(seed, attempt as u64)
    }
}

/// Augment and validate, regenerating with fresh seeds until an attempt is
/// valid or `max_retries` is used up, then fall back to the original frame.
pub fn augment_validated(
    frame: &Frame,
    augmenter: &mut dyn Augmenter,
    params: &AugmentParams,
    cfg: &ValidatorConfig,
) -> Result<ValidatedAugmentation, ValidatorError> {
    cfg.check()?;
    let start = Instant::now();
    let mut attempts = Vec::new();
    let (mut aug_ms, mut val_ms) = (0.0, 0.0);
    let mut last_verdict = None;
    for k in 0..=cfg.max_retries {
        let p = params.with_seed(retry_seed(params.seed, k));
        let res = augmenter.augment(frame, &p)?;
        let verdict = validate(frame, &res.images, cfg)?;
        aug_ms += res.elapsed_ms;
        val_ms += verdict.elapsed_ms;
        attempts.push(Attempt {
            seed: p.seed,
            augment_ms: res.elapsed_ms,
            validate_ms: verdict.elapsed_ms,
            valid: verdict.valid,
            gt_valid: res.gt_valid,
        });
        if verdict.valid {
            return Ok(ValidatedAugmentation {
                result: AugmentationResult {
                    retries: k,
                    elapsed_ms: aug_ms,
                    ..res
                },
                verdict,
                retries: k,
                fallback: false,
                attempts,
                augment_ms: aug_ms,
                validate_ms: val_ms,
                total_ms: start.elapsed().as_secs_f64() * 1e3,
            });
        }
        last_verdict = Some(verdict);
    }
    log::info!(
        "frame {}: {} attempts invalid, passing the original through",
        frame.step,
        attempts.len()
    );
    Ok(ValidatedAugmentation {
        result: AugmentationResult {
            images: frame.images(),
            elapsed_ms: aug_ms,
            server_elapsed_ms: None,
            seed_used: params.seed,
            retries: cfg.max_retries,
            gt_valid: None,
        },
        verdict: last_verdict.expect("at least one attempt"),
        retries: cfg.max_retries,
        fallback: true,
        attempts,
        augment_ms: aug_ms,
        validate_ms: val_ms,
        total_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoadCategory {
    Straight,
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreStats {
    pub count: usize,
    pub min: f64,
    pub median: f64,
    pub max: f64,
}

impl ScoreStats {
    fn of(mut v: Vec<f64>) -> Option<ScoreStats> {
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 {
            v[n / 2]
        } else {
            (v[n / 2 - 1] + v[n / 2]) / 2.0
        };
        Some(ScoreStats {
            count: n,
            min: v[0],
            median,
            max: v[n - 1],
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub threshold: f64,
    /// Share of inter-category pairs scoring at or above the threshold.
    pub inter_acceptance: f64,
    /// Share of intra-category pairs scoring below it.
    pub intra_rejection: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub n_masks: usize,
    pub intra: Option<ScoreStats>,
    pub inter: ScoreStats,
    pub thresholds: Vec<ThresholdRow>,
}

impl CalibrationReport {
    pub fn row(&self, threshold: f64) -> Option<&ThresholdRow> {
        self.thresholds
            .iter()
            .find(|r| (r.threshold - threshold).abs() < 1e-9)
    }

    pub fn to_table(&self) -> String {
        let mut out = String::from("threshold  inter_accept  intra_reject\n");
        for r in &self.thresholds {
            out.push_str(&format!(
                "{:>9.2}  {:>11.1}%  {:>11.1}%\n",
                r.threshold,
                100.0 * r.inter_acceptance,
                100.0 * r.intra_rejection
            ));
        }
        out
    }
}

fn road_bits(mask: &SemanticMask) -> Vec<u64> {
    let mut bits = vec![0u64; mask.classes().len().div_ceil(64)];
    for (i, &c) in mask.classes().iter().enumerate() {
        if c == ClassId::ROAD.0 {
            bits[i / 64] |= 1 << (i % 64);
        }
    }
    bits
}

fn bits_iou(a: &[u64], b: &[u64]) -> f64 {
    let (mut i, mut u) = (0u32, 0u32);
    for (x, y) in a.iter().zip(b) {
        i += (x & y).count_ones();
        u += (x | y).count_ones();
    }
    if u == 0 {
        1.0
    } else {
        i as f64 / u as f64
    }
}

/// Pairwise road IoU within and across categories, plus acceptance and
/// rejection rates for thresholds 0.50, 0.51, ... 0.99.
pub fn calibrate_threshold(
    labeled: &[(SemanticMask, RoadCategory)],
) -> Result<CalibrationReport, ValidatorError> {
    if labeled.len() < 2 {
        return Err(ValidatorError::TooFewMasks);
    }
    let first = labeled[0].1;
    if labeled.iter().all(|(_, c)| *c == first) {
        return Err(ValidatorError::SingleCategory);
    }
    let dims = labeled[0].0.dims();
    if let Some((m, _)) = labeled.iter().find(|(m, _)| m.dims() != dims) {
        return Err(ValidatorError::DimensionMismatch(dims, m.dims()));
    }
    let bits: Vec<Vec<u64>> = labeled.iter().map(|(m, _)| road_bits(m)).collect();
    let (mut intra, mut inter) = (Vec::new(), Vec::new());
    for i in 0..labeled.len() {
        for j in i + 1..labeled.len() {
            let s = bits_iou(&bits[i], &bits[j]);
            if labeled[i].1 == labeled[j].1 {
                intra.push(s);
            } else {
                inter.push(s);
            }
        }
    }
    let thresholds = (50..100)
        .map(|k| {
            let t = k as f64 / 100.0;
            let share = |v: &[f64], f: &dyn Fn(f64) -> bool| {
                if v.is_empty() {
                    0.0
                } else {
                    v.iter().filter(|&&s| f(s)).count() as f64 / v.len() as f64
                }
            };
            ThresholdRow {
                threshold: t,
                inter_acceptance: share(&inter, &|s| s >= t),
                intra_rejection: share(&intra, &|s| s < t),
            }
        })
        .collect();
    Ok(CalibrationReport {
        n_masks: labeled.len(),
        intra: ScoreStats::of(intra),
        inter: ScoreStats::of(inter).expect("two categories give inter pairs"),
        thresholds,
    })
}

/// `[[TP, FP], [FN, TN]]` with valid augmentations as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn layout(&self) -> [[usize; 2]; 2] {
        [[self.tp, self.fp], [self.fn_, self.tn]]
    }

    /// Share of ground-truth-invalid samples predicted invalid.
    pub fn invalid_recall(&self) -> f64 {
        ratio(self.tn, self.tn + self.fp)
    }

    /// Share of ground-truth-valid samples predicted valid.
    pub fn valid_recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    fn cell(&self, n: usize) -> String {
        format!("{n} ({:.0}%)", 100.0 * ratio(n, self.total()))
    }

    pub fn to_table(&self) -> String {
        let cells = [
            self.cell(self.tp),
            self.cell(self.fp),
            self.cell(self.fn_),
            self.cell(self.tn),
        ];
        let w = cells.iter().map(String::len).max().unwrap_or(0).max(8);
        format!(
            "{:<13} {:>w$}  {:>w$}\n{:<13} {:>w$}  {:>w$}\n{:<13} {:>w$}  {:>w$}\n",
            "",
            "gt valid",
            "gt invalid",
            "pred valid",
            cells[0],
            cells[1],
            "pred invalid",
            cells[2],
            cells[3],
        )
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Tally `(predicted_valid, gt_valid)` pairs.
pub fn evaluate_validator(samples: &[(bool, bool)]) -> Result<ConfusionMatrix, ValidatorError> {
    if samples.is_empty() {
        return Err(ValidatorError::EmptyInput);
    }
    let mut m = ConfusionMatrix::default();
    for &(pred, gt) in samples {
        match (pred, gt) {
            (true, true) => m.tp += 1,
            (true, false) => m.fp += 1,
            (false, true) => m.fn_ += 1,
            (false, false) => m.tn += 1,
        }
    }
    Ok(m)
}
