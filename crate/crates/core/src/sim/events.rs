//! Misbehavior detection between consecutive vehicle states.

use super::scene::{Actor, ObjectKind, SceneObject};
use super::track::TrackModel;
use super::vehicle::VehicleState;
use serde::{Deserialize, Serialize};

/// Below this speed the vehicle counts as stopped inside a stop zone, m/s.
pub const STOP_SPEED: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Oob,
    Collision,
    RedLight,
    StopSign,
    OffRoadUrban,
    CollisionPedestrian,
    CollisionVehicle,
}

impl EventKind {
    pub fn is_collision(self) -> bool {
        matches!(
            self,
            EventKind::Collision | EventKind::CollisionPedestrian | EventKind::CollisionVehicle
        )
    }

    pub fn is_out_of_bounds(self) -> bool {
        matches!(self, EventKind::Oob | EventKind::OffRoadUrban)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MisbehaviorEvent {
    pub kind: EventKind,
    pub step: u64,
    pub sector: usize,
    pub s: f64,
}

/// Stateful detector: stop zones need the minimum speed seen while inside.
#[derive(Debug, Clone)]
pub struct EventDetector {
    urban: bool,
    stop_min_speed: Vec<Option<f64>>,
}

/// True if the forward move from `from` by `ds` (> 0) crosses position `at`.
fn crosses(track: &TrackModel, from: f64, ds: f64, at: f64) -> bool {
    if ds <= 0.0 {
        return false;
    }
    let ahead = (at - from).rem_euclid(track.total_length());
    ahead > 0.0 && ahead <= ds
}

fn inside(track: &TrackModel, s: f64, obj: &SceneObject) -> bool {
    let s = track.wrap_s(s);
    s >= obj.s_start && s <= obj.s_end
}

impl EventDetector {
    pub fn new(scene: &[SceneObject], urban: bool) -> Self {
        EventDetector {
            urban,
            stop_min_speed: vec![None; scene.len()],
        }
    }

    /// Events for the transition `prev -> state` at `step`. The caller decides
    /// whether they are reported (cooldown suppression lives in the world).
    pub fn detect(
        &mut self,
        track: &TrackModel,
        scene: &[SceneObject],
        prev: &VehicleState,
        state: &VehicleState,
        step: u64,
        vehicle_radius: f64,
    ) -> Vec<MisbehaviorEvent> {
        let mut kinds = Vec::new();
        if state.cte.abs() > track.lane_width() / 2.0 {
            kinds.push(if self.urban {
                EventKind::OffRoadUrban
            } else {
                EventKind::Oob
            });
        }
        let ds = track.delta_s(prev.s, state.s);
        for (i, obj) in scene.iter().enumerate() {
            match obj.kind {
                ObjectKind::Obstacle => {
                    let center = (obj.s_start + obj.s_end) / 2.0;
                    let half = (obj.s_end - obj.s_start) / 2.0;
                    let dx = (track.delta_s(center, state.s).abs() - half).max(0.0);
                    let dy = ((state.cte - obj.lateral).abs() - obj.half_width).max(0.0);
                    if dx * dx + dy * dy < vehicle_radius * vehicle_radius {
                        kinds.push(match obj.actor {
                            Actor::Static => EventKind::Collision,
                            Actor::Pedestrian => EventKind::CollisionPedestrian,
                            Actor::Vehicle => EventKind::CollisionVehicle,
                        });
                    }
                }
                ObjectKind::SignalZone => {
                    if obj.is_red(step) && crosses(track, prev.s, ds, obj.s_start) {
                        kinds.push(EventKind::RedLight);
                    }
                }
                ObjectKind::StopZone => {
                    let entered = crosses(track, prev.s, ds, obj.s_start);
                    if entered || (inside(track, state.s, obj) && self.stop_min_speed[i].is_some()) {
                        let m = self.stop_min_speed[i].get_or_insert(f64::INFINITY);
                        *m = m.min(state.speed);
                    }
                    if crosses(track, prev.s, ds, obj.s_end) {
                        if let Some(m) = self.stop_min_speed[i].take() {
                            if m >= STOP_SPEED {
                                kinds.push(EventKind::StopSign);
                            }
                        }
                    }
                }
            }
        }
        let sector = track.sector_of(state.s);
        kinds
            .into_iter()
            .map(|kind| MisbehaviorEvent {
                kind,
                step,
                sector,
                s: state.s,
            })
            .collect()
    }
}
