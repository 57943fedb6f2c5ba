//! Deterministic closed-loop driving world.
//!
//! Fixed-step kinematic bicycle on a closed track split into sectors,
//! top-down rendering with exact ground-truth masks, and misbehavior
//! detection with reset-and-continue.

pub mod events;
pub mod render;
pub mod scene;
pub mod track;
pub mod vehicle;
pub mod world;

pub use events::{EventDetector, EventKind, MisbehaviorEvent};
pub use render::{CameraConfig, Frame, View};
pub use scene::{Actor, ObjectKind, SceneObject};
pub use track::{Pose, SegmentSpec, TrackModel};
pub use vehicle::{ControlCommand, VehicleParams, VehicleState};
pub use world::{Scenario, SimSettings, StepOutcome, TrackSpec, World};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("invalid track: {0}")]
    InvalidTrack(String),
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("time step must be > 0, got {0}")]
    InvalidTimestep(f64),
    #[error("point ({x:.3}, {y:.3}) is {distance:.3} m from the track")]
    TooFar { x: f64, y: f64, distance: f64 },
    #[error("no event pending; reset is only valid right after an event")]
    NoPendingEvent,
    #[error("scenario config: {0}")]
    Config(String),
}
