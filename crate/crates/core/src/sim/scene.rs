//! Static scene content placed in track coordinates.

use super::track::TrackModel;
use super::SimError;
use crate::image::ClassId;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectKind {
    Obstacle,
    SignalZone,
    StopZone,
}

/// What an obstacle is; decides its class color and collision type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Actor {
    #[default]
    Static,
    Pedestrian,
    Vehicle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub kind: ObjectKind,
    pub s_start: f64,
    pub s_end: f64,
    /// Center offset from the centerline (obstacles only), m.
    #[serde(default)]
    pub lateral: f64,
    #[serde(default = "default_half_width")]
    pub half_width: f64,
    #[serde(default)]
    pub actor: Actor,
    /// Signal zones: red between these steps, inclusive.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub red_from_step: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub red_to_step: Option<u64>,
}

fn default_half_width() -> f64 {
    0.5
}

impl SceneObject {
    pub fn obstacle(actor: Actor, s_start: f64, s_end: f64, lateral: f64, half_width: f64) -> Self {
        SceneObject {
            kind: ObjectKind::Obstacle,
            s_start,
            s_end,
            lateral,
            half_width,
            actor,
            red_from_step: None,
            red_to_step: None,
        }
    }

    pub fn signal(s_start: f64, s_end: f64, red_from: u64, red_to: u64) -> Self {
        SceneObject {
            kind: ObjectKind::SignalZone,
            s_start,
            s_end,
            lateral: 0.0,
            half_width: default_half_width(),
            actor: Actor::Static,
            red_from_step: Some(red_from),
            red_to_step: Some(red_to),
        }
    }

    pub fn stop(s_start: f64, s_end: f64) -> Self {
        SceneObject {
            kind: ObjectKind::StopZone,
            s_start,
            s_end,
            lateral: 0.0,
            half_width: default_half_width(),
            actor: Actor::Static,
            red_from_step: None,
            red_to_step: None,
        }
    }

    pub fn validate(&self, track: &TrackModel) -> Result<(), SimError> {
        let bad = |msg: String| Err(SimError::InvalidScene(msg));
        if !(self.s_start < self.s_end) {
            return bad(format!("s_start {} must be < s_end {}", self.s_start, self.s_end));
        }
        if self.s_start < 0.0 || self.s_end > track.total_length() {
            return bad(format!(
                "interval [{}, {}] outside track length {}",
                self.s_start,
                self.s_end,
                track.total_length()
            ));
        }
        if !(self.half_width > 0.0) {
            return bad("half_width must be > 0".into());
        }
        if self.kind == ObjectKind::SignalZone {
            match (self.red_from_step, self.red_to_step) {
                (Some(a), Some(b)) if a <= b => {}
                _ => return bad("signal zone needs red_from_step <= red_to_step".into()),
            }
        }
        Ok(())
    }

    pub fn is_red(&self, step: u64) -> bool {
        matches!((self.red_from_step, self.red_to_step), (Some(a), Some(b)) if a <= step && step <= b)
    }

    /// Class painted for this object's footprint.
    pub fn class(&self) -> ClassId {
        match (self.kind, self.actor) {
            (ObjectKind::Obstacle, Actor::Pedestrian) => ClassId::PEDESTRIAN,
            (ObjectKind::Obstacle, _) => ClassId::VEHICLE,
            (ObjectKind::SignalZone, _) => ClassId::TRAFFIC_LIGHT,
            (ObjectKind::StopZone, _) => ClassId::TRAFFIC_SIGN,
        }
    }

    /// Drawn footprint in track coordinates: `(s0, s1, lat0, lat1)`.
    /// Zones are marked by a roadside post just before their entry.
    pub fn footprint(&self, lane_width: f64) -> (f64, f64, f64, f64) {
        match self.kind {
            ObjectKind::Obstacle => (
                self.s_start,
                self.s_end,
                self.lateral - self.half_width,
                self.lateral + self.half_width,
            ),
            ObjectKind::SignalZone | ObjectKind::StopZone => {
                let edge = lane_width / 2.0;
                (
                    (self.s_start - 1.0).max(0.0),
                    self.s_start,
                    -(edge + 1.5),
                    -(edge + 0.5),
                )
            }
        }
    }
}
