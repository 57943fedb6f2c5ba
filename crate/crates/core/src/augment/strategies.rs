//! Procedural stand-ins for the three diffusion strategies.
//!
//! Each is a pure function of (views, masks, domain, params). Randomness
//! comes from two streams derived from the seed: stream 0 makes the
//! corruption decision and its parameters, per-row streams under 1+view
//! drive colour jitter. Row streams keep the output identical under any
//! [`Exec`] policy.

use super::domain::{to_rgb, DomainSpec};
use super::{AugmentError, AugmentParams};
use crate::exec::Exec;
use crate::image::{ClassId, Image, Rgb, SemanticMask};
use crate::rng;
use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;

pub const JITTER: i32 = 8;
/// Shear at the top row is drawn from this range, in columns of a 320-wide view.
pub const SHEAR_COLUMNS: (f64, f64) = (10.0, 40.0);
/// Road-border erosion depth range, pixels.
pub const EROSION_DEPTH: (usize, usize) = (6, 14);
/// Refine attenuates its blend weight by this factor near class boundaries.
pub const EDGE_ATTENUATION: f64 = 0.25;
pub const EDGE_RADIUS: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct MockOutput {
    pub images: Vec<Image>,
    pub corrupted: bool,
}

pub fn instruction_probability(p: &AugmentParams) -> f64 {
    (p.corrupt_base_prob * p.text_guidance / 10.0 * 2.0 / p.image_guidance.max(0.1)).clamp(0.0, 1.0)
}

pub fn inpaint_probability(p: &AugmentParams) -> f64 {
    p.corrupt_base_prob.clamp(0.0, 1.0)
}

pub fn refine_probability(p: &AugmentParams) -> f64 {
    (p.corrupt_base_prob * 2.0 * p.noise_level).clamp(0.0, 1.0)
}

fn decision_rng(seed: u64) -> ChaCha8Rng {
    rng::rng(rng::derive(seed, 0))
}

fn row_rng(seed: u64, view: usize, row: usize) -> ChaCha8Rng {
    rng::rng(rng::derive(rng::derive(seed, 1 + view as u64), row as u64))
}

#[derive(Debug, Clone, Copy)]
struct Shear {
    columns: f64,
    direction: f64,
}

fn draw_shear(r: &mut ChaCha8Rng) -> Shear {
    let columns = r.gen_range(SHEAR_COLUMNS.0..=SHEAR_COLUMNS.1);
    let direction = if r.gen_bool(0.5) { 1.0 } else { -1.0 };
    Shear { columns, direction }
}

fn check_masks<'a>(
    images: &[Image],
    masks: Option<&'a [SemanticMask]>,
) -> Result<&'a [SemanticMask], AugmentError> {
    let masks = masks.ok_or(AugmentError::MissingMask)?;
    if masks.len() != images.len() {
        return Err(AugmentError::MissingMask);
    }
    for (img, m) in images.iter().zip(masks) {
        if img.dims() != m.dims() {
            return Err(AugmentError::DimensionMismatch);
        }
    }
    Ok(masks)
}

pub fn tone_map(image: &Image, domain: &DomainSpec, exec: Exec) -> Image {
    let mut out = image.clone();
    let src = image.pixels();
    let rb = image.row_bytes();
    exec.for_rows(out.pixels_mut(), rb, |y, row| {
        let s = &src[y * rb..(y + 1) * rb];
        for (o, i) in row.chunks_exact_mut(3).zip(s.chunks_exact(3)) {
            o.copy_from_slice(&domain.tone.apply([i[0], i[1], i[2]]));
        }
    });
    out
}

/// Shift row `r` right by `round(dir · S · (H−1−r)/(H−1))` columns, with `S`
/// scaled to the view width; columns entering from the side replicate the edge.
fn shear(image: &Image, s: Shear, exec: Exec) -> Image {
    let (w, h) = image.dims();
    let top = s.columns * w as f64 / 320.0;
    let src = image.pixels();
    let rb = image.row_bytes();
    let mut out = image.clone();
    exec.for_rows(out.pixels_mut(), rb, |y, row| {
        let frac = if h > 1 { (h - 1 - y) as f64 / (h - 1) as f64 } else { 1.0 };
        let shift = (s.direction * top * frac).round() as i64;
        let s_row = &src[y * rb..(y + 1) * rb];
        for x in 0..w {
            let sx = (x as i64 - shift).clamp(0, w as i64 - 1) as usize;
            row[3 * x..3 * x + 3].copy_from_slice(&s_row[3 * sx..3 * sx + 3]);
        }
    });
    out
}

/// Road pixels within Chebyshev distance `depth` of a non-road pixel.
/// Pixels outside the view count as road.
pub fn road_border(mask: &SemanticMask, depth: usize) -> Vec<bool> {
    let (w, h) = mask.dims();
    let road: Vec<bool> = mask.classes().iter().map(|&c| c == ClassId::ROAD.0).collect();
    // horizontal then vertical "all road in window" pass
    let mut horiz = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(depth);
            let hi = (x + depth).min(w - 1);
            horiz[y * w + x] = (lo..=hi).all(|k| road[y * w + k]);
        }
    }
    let mut border = vec![false; w * h];
    for y in 0..h {
        let lo = y.saturating_sub(depth);
        let hi = (y + depth).min(h - 1);
        for x in 0..w {
            let i = y * w + x;
            border[i] = road[i] && !(lo..=hi).all(|k| horiz[k * w + x]);
        }
    }
    border
}

/// Pixels with a differently-labelled pixel within Chebyshev radius `r`.
pub fn near_boundary(mask: &SemanticMask, r: usize, exec: Exec) -> Vec<bool> {
    const MIXED: u8 = u8::MAX;
    let (w, h) = mask.dims();
    let cls = mask.classes();
    // class of each horizontal window when uniform, MIXED otherwise
    let mut horiz = vec![0u8; w * h];
    exec.for_rows(&mut horiz, w, |y, row| {
        let src = &cls[y * w..(y + 1) * w];
        for (x, o) in row.iter_mut().enumerate() {
            let win = &src[x.saturating_sub(r)..=(x + r).min(w - 1)];
            *o = if win.iter().all(|&k| k == src[x]) { src[x] } else { MIXED };
        }
    });
    let mut out = vec![false; w * h];
    exec.for_rows(&mut out, w, |y, row| {
        let (y0, y1) = (y.saturating_sub(r), (y + r).min(h - 1));
        for (x, o) in row.iter_mut().enumerate() {
            let c = cls[y * w + x];
            *o = (y0..=y1).any(|yy| horiz[yy * w + x] != c);
        }
    });
    out
}

/// `base` plus independent offsets in `[-JITTER, JITTER]`, one 16-bit lane
/// of a single draw per channel.
fn jitter(r: &mut ChaCha8Rng, base: Rgb) -> Rgb {
    let bits = r.next_u64();
    let span = (2 * JITTER + 1) as u32;
    let mut out = [0u8; 3];
    for (c, (o, b)) in out.iter_mut().zip(base).enumerate() {
        let lane = ((bits >> (16 * c)) & 0xFFFF) as u32;
        let j = ((lane * span) >> 16) as i32 - JITTER;
        *o = (b as i32 + j).clamp(0, 255) as u8;
    }
    out
}

/// Recolor every non-preserved pixel to its class target plus jitter.
/// `eroded` pixels are treated as background regardless of their class.
fn inpaint_view(
    image: &Image,
    mask: &SemanticMask,
    view: usize,
    domain: &DomainSpec,
    preserved: &[ClassId],
    eroded: Option<&[bool]>,
    seed: u64,
    exec: Exec,
) -> Image {
    let w = image.width();
    let rb = image.row_bytes();
    let src = image.pixels();
    let cls = mask.classes();
    let mut keep = [false; 256];
    for c in preserved {
        keep[c.0 as usize] = true;
    }
    let mut out = image.clone();
    exec.for_rows(out.pixels_mut(), rb, |y, row| {
        let mut r = row_rng(seed, view, y);
        for x in 0..w {
            let i = y * w + x;
            // every pixel consumes its jitter draw so streams never depend on the mask
            let eroded_px = eroded.is_some_and(|e| e[i]);
            let class = if eroded_px { ClassId::BACKGROUND } else { ClassId(cls[i]) };
            let target = jitter(&mut r, domain.target(class));
            let px = if keep[class.0 as usize] && !eroded_px {
                [src[y * rb + 3 * x], src[y * rb + 3 * x + 1], src[y * rb + 3 * x + 2]]
            } else {
                target
            };
            row[3 * x..3 * x + 3].copy_from_slice(&px);
        }
    });
    out
}

pub fn instruction(
    images: &[Image],
    domain: &DomainSpec,
    params: &AugmentParams,
    exec: Exec,
) -> Result<MockOutput, AugmentError> {
    params.validate()?;
    let mut r = decision_rng(params.seed);
    let corrupted = r.gen::<f64>() < instruction_probability(params);
    let sh = corrupted.then(|| draw_shear(&mut r));
    let images = images
        .iter()
        .map(|img| {
            let toned = tone_map(img, domain, exec);
            match sh {
                Some(s) => shear(&toned, s, exec),
                None => toned,
            }
        })
        .collect();
    Ok(MockOutput { images, corrupted })
}

pub fn inpaint(
    images: &[Image],
    masks: Option<&[SemanticMask]>,
    domain: &DomainSpec,
    params: &AugmentParams,
    preserved: &[ClassId],
    exec: Exec,
) -> Result<MockOutput, AugmentError> {
    params.validate()?;
    let masks = check_masks(images, masks)?;
    let mut r = decision_rng(params.seed);
    let corrupted = r.gen::<f64>() < inpaint_probability(params);
    let depth = corrupted.then(|| r.gen_range(EROSION_DEPTH.0..=EROSION_DEPTH.1));
    let images = images
        .iter()
        .zip(masks)
        .enumerate()
        .map(|(v, (img, m))| {
            let eroded = depth.map(|d| road_border(m, d));
            inpaint_view(img, m, v, domain, preserved, eroded.as_deref(), params.seed, exec)
        })
        .collect();
    Ok(MockOutput { images, corrupted })
}

pub fn refine(
    images: &[Image],
    masks: Option<&[SemanticMask]>,
    domain: &DomainSpec,
    params: &AugmentParams,
    preserved: &[ClassId],
    exec: Exec,
) -> Result<MockOutput, AugmentError> {
    params.validate()?;
    let masks = check_masks(images, masks)?;
    let mut r = decision_rng(params.seed);
    let corrupted = r.gen::<f64>() < refine_probability(params);
    let sh = corrupted.then(|| draw_shear(&mut r));
    let nu = params.noise_level;
    let images = images
        .iter()
        .zip(masks)
        .enumerate()
        .map(|(v, (img, m))| {
            let inp = inpaint_view(img, m, v, domain, preserved, None, params.seed, exec);
            let edges = near_boundary(m, EDGE_RADIUS, exec);
            let src = img.pixels();
            let inp_px = inp.pixels();
            let mut out = inp.clone();
            let w = img.width();
            let rb = img.row_bytes();
            exec.for_rows(out.pixels_mut(), rb, |y, row| {
                for x in 0..w {
                    let o = y * rb + 3 * x;
                    let wt = if edges[y * w + x] { nu * EDGE_ATTENUATION } else { nu };
                    let toned = domain.tone.apply([src[o], src[o + 1], src[o + 2]]);
                    let mut px = [0.0; 3];
                    for c in 0..3 {
                        px[c] = (1.0 - wt) * inp_px[o + c] as f64 + wt * toned[c] as f64;
                    }
                    row[3 * x..3 * x + 3].copy_from_slice(&to_rgb(px));
                }
            });
            match sh {
                Some(s) => shear(&out, s, exec),
                None => out,
            }
        })
        .collect();
    Ok(MockOutput { images, corrupted })
}
