//! Class palettes and nearest-color segmentation.
//!
//! The simulator draws every class with its exact palette color, so
//! palette segmentation of an unaugmented frame reproduces the ground-truth
//! mask. Any learned segmenter with the same `Image -> SemanticMask` shape
//! can stand in for it (see [`crate::validator::Segmenter`]).

use crate::exec::Exec;
use crate::image::{ClassId, Image, Rgb, SemanticMask};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PaletteError {
    #[error("palette is empty")]
    Empty,
    #[error("class {0} listed twice")]
    DuplicateClass(ClassId),
    #[error("classes {0} and {1} share color {2:?}")]
    SharedColor(ClassId, ClassId, Rgb),
    #[error("palette must contain road and background")]
    MissingRequired,
}

/// One reference color per class, kept sorted by class id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<ClassId, Rgb>", into = "BTreeMap<ClassId, Rgb>")]
pub struct Palette {
    entries: Vec<(ClassId, Rgb)>,
}

impl Palette {
    pub fn new(entries: impl IntoIterator<Item = (ClassId, Rgb)>) -> Result<Self, PaletteError> {
        let mut entries: Vec<(ClassId, Rgb)> = entries.into_iter().collect();
        if entries.is_empty() {
            return Err(PaletteError::Empty);
        }
        entries.sort_by_key(|e| e.0);
        for w in entries.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(PaletteError::DuplicateClass(w[0].0));
            }
        }
        for (i, a) in entries.iter().enumerate() {
            for b in &entries[i + 1..] {
                if a.1 == b.1 {
                    return Err(PaletteError::SharedColor(a.0, b.0, a.1));
                }
            }
        }
        let has = |c: ClassId| entries.iter().any(|e| e.0 == c);
        if !has(ClassId::ROAD) || !has(ClassId::BACKGROUND) {
            return Err(PaletteError::MissingRequired);
        }
        Ok(Palette { entries })
    }

    /// Colors the simulator renders with.
    pub fn simulator() -> Self {
        Palette::new([
            (ClassId::BACKGROUND, [40, 100, 40]),
            (ClassId::ROAD, [128, 128, 128]),
            (ClassId::PEDESTRIAN, [220, 20, 60]),
            (ClassId::VEHICLE, [0, 0, 142]),
            (ClassId::TRAFFIC_SIGN, [220, 220, 0]),
            (ClassId::TRAFFIC_LIGHT, [250, 170, 30]),
        ])
        .expect("simulator palette is valid")
    }

    pub fn entries(&self) -> &[(ClassId, Rgb)] {
        &self.entries
    }

    pub fn classes(&self) -> Vec<ClassId> {
        self.entries.iter().map(|e| e.0).collect()
    }

    pub fn color(&self, class: ClassId) -> Option<Rgb> {
        self.entries.iter().find(|e| e.0 == class).map(|e| e.1)
    }

    /// Nearest class by squared RGB distance; ties go to the lowest id.
    pub fn classify(&self, px: Rgb) -> ClassId {
        let mut best = self.entries[0].0;
        let mut best_d = u32::MAX;
        for &(class, c) in &self.entries {
            let d = sq_dist(px, c);
            if d < best_d {
                best_d = d;
                best = class;
            }
        }
        best
    }
}

impl TryFrom<BTreeMap<ClassId, Rgb>> for Palette {
    type Error = PaletteError;
    fn try_from(map: BTreeMap<ClassId, Rgb>) -> Result<Self, Self::Error> {
        Palette::new(map)
    }
}

impl From<Palette> for BTreeMap<ClassId, Rgb> {
    fn from(p: Palette) -> Self {
        p.entries.into_iter().collect()
    }
}

pub fn sq_dist(a: Rgb, b: Rgb) -> u32 {
    let d = |i: usize| (a[i] as i32 - b[i] as i32).pow(2) as u32;
    d(0) + d(1) + d(2)
}

pub fn segment_palette(image: &Image, palette: &Palette) -> SemanticMask {
    segment_palette_with(image, palette, Exec::default())
}

pub fn segment_palette_with(image: &Image, palette: &Palette, exec: Exec) -> SemanticMask {
    let (w, h) = image.dims();
    let mut classes = vec![0u8; w * h];
    let px = image.pixels();
    exec.for_rows(&mut classes, w, |y, row| {
        let src = &px[y * w * 3..(y + 1) * w * 3];
        let mut last: Option<(Rgb, ClassId)> = None;
        for (x, out) in row.iter_mut().enumerate() {
            let c = [src[x * 3], src[x * 3 + 1], src[x * 3 + 2]];
            let class = match last {
                Some((lc, lk)) if lc == c => lk,
                _ => {
                    let k = palette.classify(c);
                    last = Some((c, k));
                    k
                }
            };
            *out = class.0;
        }
    });
    SemanticMask::new(w, h, classes).expect("dims come from a valid image")
}
