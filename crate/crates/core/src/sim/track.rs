//! Closed tracks built from straights and constant-curvature arcs.

use super::SimError;
use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, TAU};

const CLOSURE_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SegmentSpec {
    Straight { length: f64 },
    /// Signed curvature, positive turns left.
    Arc { length: f64, curvature: f64 },
}

impl SegmentSpec {
    pub fn length(&self) -> f64 {
        match *self {
            SegmentSpec::Straight { length } | SegmentSpec::Arc { length, .. } => length,
        }
    }

    pub fn curvature(&self) -> f64 {
        match *self {
            SegmentSpec::Straight { .. } => 0.0,
            SegmentSpec::Arc { curvature, .. } => curvature,
        }
    }

    /// Quarter turn of the given radius; `left` picks the direction.
    pub fn quarter(radius: f64, left: bool) -> Self {
        SegmentSpec::Arc {
            length: PI / 2.0 * radius,
            curvature: if left { 1.0 / radius } else { -1.0 / radius },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

/// Nearest centerline point of one query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub s: f64,
    /// Signed lateral offset, left of travel direction positive.
    pub lateral: f64,
    pub distance: f64,
}

#[derive(Debug, Clone)]
struct Segment {
    spec: SegmentSpec,
    start: Pose,
    s0: f64,
    bbox: [f64; 4],
    // cached per-segment constants for projection
    cos_h: f64,
    sin_h: f64,
    center: (f64, f64),
    a0: f64,
}

#[derive(Debug, Clone)]
pub struct TrackModel {
    segments: Vec<Segment>,
    lane_width: f64,
    n_sectors: usize,
    total_length: f64,
}

fn wrap_angle_pos(a: f64) -> f64 {
    let r = a.rem_euclid(TAU);
    if r >= TAU {
        0.0
    } else {
        r
    }
}

impl Segment {
    fn pose_at(&self, t: f64) -> Pose {
        let p = self.start;
        let k = self.spec.curvature();
        if k == 0.0 {
            Pose {
                x: p.x + t * p.heading.cos(),
                y: p.y + t * p.heading.sin(),
                heading: p.heading,
            }
        } else {
            let h = p.heading + k * t;
            Pose {
                x: p.x + (h.sin() - p.heading.sin()) / k,
                y: p.y - (h.cos() - p.heading.cos()) / k,
                heading: h,
            }
        }
    }

    fn endpoint_projection(&self, x: f64, y: f64, t: f64) -> (f64, f64, f64) {
        let e = self.pose_at(t);
        let (rx, ry) = (x - e.x, y - e.y);
        let lateral = e.heading.cos() * ry - e.heading.sin() * rx;
        (t, lateral, rx.hypot(ry))
    }

    /// (local arclength, signed lateral, distance), or `None` once the
    /// distance provably cannot beat `bound`.
    fn project_bounded(&self, x: f64, y: f64, bound: f64) -> Option<(f64, f64, f64)> {
        let p = self.start;
        let len = self.spec.length();
        let k = self.spec.curvature();
        if k == 0.0 {
            let (c, s) = (self.cos_h, self.sin_h);
            let (dx, dy) = (x - p.x, y - p.y);
            let t = (dx * c + dy * s).clamp(0.0, len);
            let (rx, ry) = (x - (p.x + t * c), y - (p.y + t * s));
            let lateral = c * ry - s * rx;
            return Some((t, lateral, (rx * rx + ry * ry).sqrt()));
        }
        let r = 1.0 / k.abs();
        let (cx, cy) = self.center;
        let (qx, qy) = (x - cx, y - cy);
        let rho = (qx * qx + qy * qy).sqrt();
        // every point of the arc lies on the circle, so |rho - r| is a lower bound
        if (rho - r).abs() >= bound {
            return None;
        }
        if rho < 1e-12 {
            return Some(self.endpoint_projection(x, y, 0.0));
        }
        let a = qy.atan2(qx);
        let delta = wrap_angle_pos(k.signum() * (a - self.a0));
        let sweep = k.abs() * len;
        if delta <= sweep {
            let lateral = if k > 0.0 { r - rho } else { rho - r };
            return Some((delta / k.abs(), lateral, (rho - r).abs()));
        }
        let a = self.endpoint_projection(x, y, 0.0);
        let b = self.endpoint_projection(x, y, len);
        Some(if a.2 <= b.2 { a } else { b })
    }

    fn bbox_hit(&self, bb: [f64; 4], margin: f64) -> bool {
        !(bb[2] < self.bbox[0] - margin
            || bb[0] > self.bbox[2] + margin
            || bb[3] < self.bbox[1] - margin
            || bb[1] > self.bbox[3] + margin)
    }
}

impl TrackModel {
    pub fn new(specs: &[SegmentSpec], lane_width: f64, n_sectors: usize) -> Result<Self, SimError> {
        if specs.is_empty() {
            return Err(SimError::InvalidTrack("no segments".into()));
        }
        if !(lane_width > 0.0) {
            return Err(SimError::InvalidTrack(format!("lane_width {lane_width} must be > 0")));
        }
        if n_sectors == 0 {
            return Err(SimError::InvalidTrack("n_sectors must be ≥ 1".into()));
        }
        let mut segments = Vec::with_capacity(specs.len());
        let mut pose = Pose {
            x: 0.0,
            y: 0.0,
            heading: 0.0,
        };
        let mut s0 = 0.0;
        for spec in specs {
            if !(spec.length() > 0.0) || !spec.curvature().is_finite() {
                return Err(SimError::InvalidTrack(format!("bad segment {spec:?}")));
            }
            let mut seg = Segment {
                spec: *spec,
                start: pose,
                s0,
                bbox: [f64::MAX, f64::MAX, f64::MIN, f64::MIN],
                cos_h: pose.heading.cos(),
                sin_h: pose.heading.sin(),
                center: (0.0, 0.0),
                a0: 0.0,
            };
            let k = spec.curvature();
            if k != 0.0 {
                let c = (pose.x - seg.sin_h / k, pose.y + seg.cos_h / k);
                seg.center = c;
                seg.a0 = (pose.y - c.1).atan2(pose.x - c.0);
            }
            let n = 64;
            for i in 0..=n {
                let q = seg.pose_at(spec.length() * i as f64 / n as f64);
                seg.bbox[0] = seg.bbox[0].min(q.x);
                seg.bbox[1] = seg.bbox[1].min(q.y);
                seg.bbox[2] = seg.bbox[2].max(q.x);
                seg.bbox[3] = seg.bbox[3].max(q.y);
            }
            // chord sagitta bound between samples
            let sag = {
                let k = spec.curvature().abs();
                if k == 0.0 {
                    0.0
                } else {
                    let half = spec.length() / n as f64 * k / 2.0;
                    (1.0 - half.cos()) / k
                }
            };
            for (i, v) in seg.bbox.iter_mut().enumerate() {
                *v += if i < 2 { -sag - 1e-9 } else { sag + 1e-9 };
            }
            pose = seg.pose_at(spec.length());
            s0 += spec.length();
            segments.push(seg);
        }
        let gap = pose.x.hypot(pose.y);
        let dh = (pose.heading.rem_euclid(TAU) + PI).rem_euclid(TAU) - PI;
        if gap > CLOSURE_TOL || dh.abs() > 1e-9 {
            return Err(SimError::InvalidTrack(format!(
                "track does not close: end pose ({:.9}, {:.9}, {:.9} rad)",
                pose.x, pose.y, dh
            )));
        }
        Ok(TrackModel {
            segments,
            lane_width,
            n_sectors,
            total_length: s0,
        })
    }

    /// Rounded loop with three left quarter turns, one right quarter turn and a
    /// closing left half circle, all of radius 20 m.
    pub fn default_specs() -> Vec<SegmentSpec> {
        let r = 20.0;
        vec![
            SegmentSpec::Straight { length: 60.0 },
            SegmentSpec::quarter(r, true),
            SegmentSpec::Straight { length: 40.0 },
            SegmentSpec::quarter(r, true),
            SegmentSpec::Straight { length: 20.0 },
            SegmentSpec::quarter(r, true),
            SegmentSpec::quarter(r, false),
            SegmentSpec::Arc {
                length: PI * r,
                curvature: 1.0 / r,
            },
        ]
    }

    pub fn default_track() -> Self {
        TrackModel::new(&TrackModel::default_specs(), 4.0, 40).expect("default track closes")
    }

    pub fn lane_width(&self) -> f64 {
        self.lane_width
    }

    pub fn n_sectors(&self) -> usize {
        self.n_sectors
    }

    pub fn total_length(&self) -> f64 {
        self.total_length
    }

    pub fn specs(&self) -> Vec<SegmentSpec> {
        self.segments.iter().map(|s| s.spec).collect()
    }

    pub fn wrap_s(&self, s: f64) -> f64 {
        let r = s.rem_euclid(self.total_length);
        if r >= self.total_length {
            0.0
        } else {
            r
        }
    }

    /// Signed shortest arclength from `from` to `to`, in (-L/2, L/2].
    pub fn delta_s(&self, from: f64, to: f64) -> f64 {
        let l = self.total_length;
        let mut d = (to - from).rem_euclid(l);
        if d > l / 2.0 {
            d -= l;
        }
        d
    }

    pub fn sector_of(&self, s: f64) -> usize {
        let idx = (self.n_sectors as f64 * self.wrap_s(s) / self.total_length).floor() as usize;
        idx.min(self.n_sectors - 1)
    }

    pub fn pose_at(&self, s: f64) -> Pose {
        let s = self.wrap_s(s);
        let i = self
            .segments
            .partition_point(|seg| seg.s0 <= s)
            .saturating_sub(1);
        let seg = &self.segments[i];
        seg.pose_at((s - seg.s0).min(seg.spec.length()))
    }

    /// Nearest centerline point over all segments.
    pub fn project(&self, x: f64, y: f64) -> Result<Projection, SimError> {
        let p = self.project_with(x, y, 0..self.segments.len());
        match p {
            Some(p) if p.distance <= 10.0 * self.lane_width => Ok(p),
            Some(p) => Err(SimError::TooFar {
                x,
                y,
                distance: p.distance,
            }),
            None => unreachable!("tracks have at least one segment"),
        }
    }

    pub fn project_to_centerline(&self, x: f64, y: f64) -> Result<(f64, f64), SimError> {
        self.project(x, y).map(|p| (p.s, p.lateral))
    }

    pub(crate) fn project_with(
        &self,
        x: f64,
        y: f64,
        candidates: impl IntoIterator<Item = usize>,
    ) -> Option<Projection> {
        self.project_within(x, y, candidates, f64::INFINITY)
    }

    /// Nearest projection among `candidates` with distance below `limit`.
    pub(crate) fn project_within(
        &self,
        x: f64,
        y: f64,
        candidates: impl IntoIterator<Item = usize>,
        limit: f64,
    ) -> Option<Projection> {
        let mut best: Option<Projection> = None;
        for i in candidates {
            let seg = &self.segments[i];
            let bound = best.map_or(limit, |b| b.distance);
            let Some((t, lateral, distance)) = seg.project_bounded(x, y, bound) else {
                continue;
            };
            if distance < bound {
                best = Some(Projection {
                    s: self.wrap_s(seg.s0 + t),
                    lateral,
                    distance,
                });
            }
        }
        best
    }

    /// Segment indices whose bounding box, grown by `margin`, meets `bbox`
    /// (`[min_x, min_y, max_x, max_y]`).
    pub(crate) fn candidates(&self, bbox: [f64; 4], margin: f64) -> Vec<usize> {
        (0..self.segments.len())
            .filter(|&i| self.segments[i].bbox_hit(bbox, margin))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_track_closes() {
        let t = TrackModel::default_track();
        assert_eq!(t.n_sectors(), 40);
        let expected = 120.0 + 4.0 * PI / 2.0 * 20.0 + PI * 20.0;
        assert!((t.total_length() - expected).abs() < 1e-9);
    }

    #[test]
    fn open_track_rejected() {
        let r = TrackModel::new(&[SegmentSpec::Straight { length: 10.0 }], 4.0, 40);
        assert!(matches!(r, Err(SimError::InvalidTrack(_))));
        assert!(TrackModel::new(&TrackModel::default_specs(), 0.0, 40).is_err());
        assert!(TrackModel::new(&TrackModel::default_specs(), 4.0, 0).is_err());
    }

    #[test]
    fn projection_basics() {
        let t = TrackModel::default_track();
        let (s, cte) = t.project_to_centerline(0.0, 0.0).unwrap();
        assert!(s.abs() < 1e-9 || (s - t.total_length()).abs() < 1e-9);
        assert!(cte.abs() < 1e-12);
        // one metre left of the first straight (heading +x, left is +y)
        let (s, cte) = t.project_to_centerline(30.0, 1.0).unwrap();
        assert!((s - 30.0).abs() < 1e-12);
        assert!((cte - 1.0).abs() < 1e-12);
        let (_, cte) = t.project_to_centerline(30.0, -0.5).unwrap();
        assert!((cte + 0.5).abs() < 1e-12);
        assert!(matches!(
            t.project_to_centerline(30.0, -200.0),
            Err(SimError::TooFar { .. })
        ));
    }

    #[test]
    fn pose_and_projection_agree_along_track() {
        let t = TrackModel::default_track();
        let n = 500;
        for i in 0..n {
            let s = t.total_length() * i as f64 / n as f64;
            let p = t.pose_at(s);
            for off in [-1.5, 0.0, 1.5] {
                let (x, y) = (p.x - off * p.heading.sin(), p.y + off * p.heading.cos());
                let q = t.project(x, y).unwrap();
                assert!(t.delta_s(s, q.s).abs() < 1e-6, "s {s} vs {}", q.s);
                assert!((q.lateral - off).abs() < 1e-6, "lat at s {s}: {} vs {off}", q.lateral);
            }
        }
    }

    #[test]
    fn sectors_cover_range() {
        let t = TrackModel::default_track();
        assert_eq!(t.sector_of(0.0), 0);
        assert_eq!(t.sector_of(t.total_length() - 1e-9), 39);
        assert_eq!(t.sector_of(t.total_length() / 40.0 * 3.5), 3);
    }
}
