#![allow(dead_code)]

use adstest::distill::{AffineTeacher, ClassMap};
use adstest::image::{ClassId, Image, SemanticMask};
use adstest::palette::Palette;
use adstest::sim::{Frame, Scenario, VehicleState, World};
use adstest::validator::RoadCategory;
use rand::Rng;
use std::collections::{BTreeMap, HashSet};

/// Intersection over union of `class` by explicit coordinate sets.
pub fn brute_iou(a: &SemanticMask, b: &SemanticMask, class: ClassId) -> f64 {
    let set = |m: &SemanticMask| -> HashSet<(usize, usize)> {
        let mut s = HashSet::new();
        for y in 0..m.height() {
            for x in 0..m.width() {
                if m.get(x, y) == class {
                    s.insert((x, y));
                }
            }
        }
        s
    };
    let (sa, sb) = (set(a), set(b));
    let union = sa.union(&sb).count();
    if union == 0 {
        return 1.0;
    }
    sa.intersection(&sb).count() as f64 / union as f64
}

/// Road band occupying the lower half of a 160×320 mask, bending by `bend`
/// pixels at the horizon, offset sideways by `shift`.
pub fn road_mask(bend: f64, shift: f64) -> SemanticMask {
    let (w, h) = (320usize, 160usize);
    let mut m = SemanticMask::filled(w, h, ClassId::BACKGROUND);
    for y in h / 2..h {
        let t = (h - 1 - y) as f64 / (h / 2) as f64;
        let c = w as f64 / 2.0 + shift + bend * t * t;
        let hw = 18.0 + 70.0 * (1.0 - t);
        for x in 0..w {
            let xc = x as f64 + 0.5;
            if (xc - c).abs() <= hw {
                m.set(x, y, ClassId::ROAD);
            }
        }
    }
    m
}

/// Labelled masks whose road IoU is high within a category and low across.
pub fn calibration_fixture(per_category: usize) -> Vec<(SemanticMask, RoadCategory)> {
    let mut out = Vec::new();
    for (bend, cat) in [
        (0.0, RoadCategory::Straight),
        (-150.0, RoadCategory::Left),
        (150.0, RoadCategory::Right),
    ] {
        for i in 0..per_category {
            let shift = (i as f64 / per_category.max(1) as f64) - 0.5;
            out.push((road_mask(bend, shift), cat));
        }
    }
    out
}

/// Per-pixel colour noise that never moves a pixel out of its palette cell.
pub fn textured(img: &Image, palette: &Palette, amplitude: i32, seed: u64) -> Image {
    let mut r = adstest::rng::rng(seed);
    let mut out = img.clone();
    for i in 0..img.pixel_count() {
        let px = img.at(i);
        let c = palette.classify(px);
        let j: [u8; 3] =
            std::array::from_fn(|k| (px[k] as i32 + r.gen_range(-amplitude..=amplitude)).clamp(0, 255) as u8);
        let q = if palette.classify(j) == c { j } else { px };
        out.pixels_mut()[3 * i..3 * i + 3].copy_from_slice(&q);
    }
    out
}

/// Frames from `n` evenly spread poses on the default loop.
pub fn spread_frames(n: usize, offset_m: f64) -> Vec<Frame> {
    let mut w = World::new(&Scenario::lane_keeping()).unwrap();
    let len = w.track().total_length();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let s = offset_m + len * i as f64 / n as f64;
        w.set_state(VehicleState::on_centerline(w.track(), s, 5.0));
        out.push(w.render());
    }
    out
}

/// Exact per-class affine teacher with a non-trivial map on every class.
pub fn mixing_teacher() -> AffineTeacher {
    let mut maps = BTreeMap::new();
    maps.insert(
        ClassId::ROAD,
        ClassMap {
            m: [[0.8, 0.1, 0.0], [0.0, 0.9, 0.05], [0.05, 0.0, 0.85]],
            b: [0.02, 0.01, 0.03],
        },
    );
    maps.insert(
        ClassId::BACKGROUND,
        ClassMap {
            m: [[0.35, 0.0, 0.0], [0.0, 0.4, 0.0], [0.0, 0.1, 0.55]],
            b: [0.0, 0.02, 0.08],
        },
    );
    AffineTeacher::new(maps)
}

/// Teacher output keyed by palette segmentation, the same class source the
/// student uses.
pub fn teach(t: &AffineTeacher, img: &Image) -> Image {
    t.apply(img, &adstest::palette::segment_palette(img, &Palette::simulator()))
}
