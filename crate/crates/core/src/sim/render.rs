//! Top-down camera rasterizer.
//!
//! Each pixel center is mapped to a world point in front of the vehicle,
//! projected onto the centerline, and painted with the palette color of the
//! class found there. The class is written to the mask in the same pass, so
//! the mask is exactly the ground truth of the image.

use super::scene::SceneObject;
use super::track::TrackModel;
use super::vehicle::VehicleState;
use crate::exec::Exec;
use crate::image::{ClassId, Image, SemanticMask, DEFAULT_HEIGHT, DEFAULT_WIDTH};
use crate::palette::Palette;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraConfig {
    pub width: usize,
    pub height: usize,
    /// Distance covered from the bottom row to the top row, m.
    pub forward_range: f64,
    /// Distance covered from the left column to the right column, m.
    pub lateral_range: f64,
    /// Yaw of each view relative to the vehicle heading, rad (left positive).
    pub yaws: Vec<f64>,
}

impl Default for CameraConfig {
    fn default() -> Self {
        CameraConfig {
            width: DEFAULT_WIDTH,
            height: DEFAULT_HEIGHT,
            forward_range: 16.0,
            lateral_range: 16.0,
            yaws: vec![0.0],
        }
    }
}

impl CameraConfig {
    /// Front, left and right views at the urban resolution.
    pub fn urban() -> Self {
        CameraConfig {
            width: crate::image::URBAN_WIDTH,
            height: crate::image::URBAN_HEIGHT,
            forward_range: 24.0,
            lateral_range: 32.0,
            yaws: vec![0.0, std::f64::consts::FRAC_PI_3, -std::f64::consts::FRAC_PI_3],
        }
    }

    /// Forward and left offsets (m) of a pixel center.
    pub fn pixel_offsets(&self, col: usize, row: usize) -> (f64, f64) {
        let fwd = (self.height as f64 - row as f64 - 0.5) * self.forward_range / self.height as f64;
        let left = (self.width as f64 / 2.0 - col as f64 - 0.5) * self.lateral_range / self.width as f64;
        (fwd, left)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub image: Image,
    pub mask: SemanticMask,
}

/// Everything the simulator emits at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub step: u64,
    pub views: Vec<View>,
    pub state: VehicleState,
}

impl Frame {
    pub fn images(&self) -> Vec<Image> {
        self.views.iter().map(|v| v.image.clone()).collect()
    }

    pub fn masks(&self) -> Vec<SemanticMask> {
        self.views.iter().map(|v| v.mask.clone()).collect()
    }

    /// Same masks and state, new pixels.
    pub fn with_images(&self, images: Vec<Image>) -> Frame {
        assert_eq!(images.len(), self.views.len(), "view count must match");
        Frame {
            step: self.step,
            state: self.state,
            views: self
                .views
                .iter()
                .zip(images)
                .map(|(v, image)| View {
                    image,
                    mask: v.mask.clone(),
                })
                .collect(),
        }
    }
}

pub struct Renderer<'a> {
    pub track: &'a TrackModel,
    pub scene: &'a [SceneObject],
    pub camera: &'a CameraConfig,
    pub palette: &'a Palette,
}

impl Renderer<'_> {
    pub fn render(&self, state: &VehicleState, step: u64, exec: Exec) -> Frame {
        let views = self
            .camera
            .yaws
            .iter()
            .map(|&yaw| self.render_view(state, yaw, exec))
            .collect();
        Frame {
            step,
            views,
            state: *state,
        }
    }

    fn classify(&self, p: Option<super::track::Projection>, lane_width: f64) -> ClassId {
        let Some(p) = p else {
            return ClassId::BACKGROUND;
        };
        for obj in self.scene {
            let (s0, s1, l0, l1) = obj.footprint(lane_width);
            if p.s >= s0 && p.s <= s1 && p.lateral >= l0 && p.lateral <= l1 {
                return obj.class();
            }
        }
        if p.lateral.abs() <= lane_width / 2.0 {
            ClassId::ROAD
        } else {
            ClassId::BACKGROUND
        }
    }

    fn render_view(&self, state: &VehicleState, yaw: f64, exec: Exec) -> View {
        let cam = self.camera;
        let (w, h) = (cam.width, cam.height);
        let heading = state.heading + yaw;
        let (c, s) = (heading.cos(), heading.sin());
        let to_world = |col: usize, row: usize| {
            let (f, l) = cam.pixel_offsets(col, row);
            (state.x + f * c - l * s, state.y + f * s + l * c)
        };
        let lane = self.track.lane_width();
        let margin = lane / 2.0 + 2.0;
        let limit = margin + 1e-9;
        let colors: Vec<[u8; 3]> = (0..=255u8)
            .map(|k| self.palette.color(ClassId(k)).unwrap_or([0, 0, 0]))
            .collect();

        let mut pixels = vec![0u8; w * h * 3];
        let mut classes = vec![0u8; w * h];
        exec.for_rows2(&mut pixels, w * 3, &mut classes, w, |row, px, cls| {
            let (x0, y0) = to_world(0, row);
            let (x1, y1) = to_world(w - 1, row);
            let bbox = [x0.min(x1), y0.min(y1), x0.max(x1), y0.max(y1)];
            let cands = self.track.candidates(bbox, margin);
            for col in 0..w {
                let (x, y) = to_world(col, row);
                let proj = self
                    .track
                    .project_within(x, y, cands.iter().copied(), limit)
                    .filter(|p| p.distance <= margin);
                let class = self.classify(proj, lane);
                cls[col] = class.0;
                px[col * 3..col * 3 + 3].copy_from_slice(&colors[class.index()]);
            }
        });
        View {
            image: Image::new(w, h, pixels).expect("camera dims are non-zero"),
            mask: SemanticMask::new(w, h, classes).expect("camera dims are non-zero"),
        }
    }
}
