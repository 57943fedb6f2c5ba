//! The closed-loop world: track, scene, vehicle, rendering and event logic.

use super::events::{EventDetector, MisbehaviorEvent};
use super::render::{CameraConfig, Frame, Renderer};
use super::scene::SceneObject;
use super::track::{SegmentSpec, TrackModel};
use super::vehicle::{self, ControlCommand, VehicleParams, VehicleState};
use super::SimError;
use crate::exec::Exec;
use crate::palette::Palette;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::time::Duration;

/// Steps during which events are suppressed after a reset.
pub const RESET_COOLDOWN_STEPS: u32 = 20;
/// Distance the vehicle is moved forward on reset, m.
pub const RESET_ADVANCE_M: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackSpec {
    /// Named built-in layout; used when `segments` is empty.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub segments: Vec<SegmentSpec>,
    #[serde(default = "default_lane_width")]
    pub lane_width: f64,
    #[serde(default = "default_sectors")]
    pub n_sectors: usize,
}

fn default_lane_width() -> f64 {
    4.0
}

fn default_sectors() -> usize {
    40
}

impl Default for TrackSpec {
    fn default() -> Self {
        TrackSpec {
            preset: Some("default".into()),
            segments: Vec::new(),
            lane_width: default_lane_width(),
            n_sectors: default_sectors(),
        }
    }
}

impl TrackSpec {
    pub fn build(&self) -> Result<TrackModel, SimError> {
        let segments = if !self.segments.is_empty() {
            self.segments.clone()
        } else {
            match self.preset.as_deref() {
                Some("default") | None => TrackModel::default_specs(),
                Some(other) => {
                    return Err(SimError::InvalidTrack(format!("unknown track preset '{other}'")))
                }
            }
        };
        TrackModel::new(&segments, self.lane_width, self.n_sectors)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimSettings {
    pub dt: f64,
    pub initial_speed: f64,
    pub start_s: f64,
    /// Urban mode reports off-road infractions instead of OOB.
    pub urban: bool,
    pub seed: u64,
    pub n_steps: usize,
    /// Emulated per-step cost of a heavyweight simulator, ms.
    pub step_latency_ms: f64,
}

impl Default for SimSettings {
    fn default() -> Self {
        SimSettings {
            dt: 0.1,
            initial_speed: 5.0,
            start_s: 0.0,
            urban: false,
            seed: 0,
            n_steps: 2000,
            step_latency_ms: 0.0,
        }
    }
}

/// Scenario file contents (TOML).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub track: TrackSpec,
    #[serde(default)]
    pub objects: Vec<SceneObject>,
    #[serde(default)]
    pub camera: CameraConfig,
    #[serde(default)]
    pub vehicle: VehicleParams,
    #[serde(default)]
    pub simulation: SimSettings,
}

fn default_name() -> String {
    "scenario".into()
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario::lane_keeping()
    }
}

impl Scenario {
    /// Default 40-sector lane-keeping loop, no scene objects.
    pub fn lane_keeping() -> Self {
        Scenario {
            name: "default".into(),
            track: TrackSpec::default(),
            objects: Vec::new(),
            camera: CameraConfig::default(),
            vehicle: VehicleParams::default(),
            simulation: SimSettings::default(),
        }
    }

    /// Urban variant: three views, parked vehicles, a pedestrian, a signal and a stop zone.
    pub fn urban() -> Self {
        use super::scene::Actor;
        Scenario {
            name: "urban".into(),
            track: TrackSpec::default(),
            objects: vec![
                SceneObject::obstacle(Actor::Vehicle, 20.0, 24.5, 3.6, 0.9),
                SceneObject::obstacle(Actor::Vehicle, 150.0, 154.5, -3.6, 0.9),
                SceneObject::obstacle(Actor::Pedestrian, 100.0, 100.6, 3.2, 0.3),
                SceneObject::signal(45.0, 50.0, 30, 60),
                SceneObject::stop(210.0, 213.0),
            ],
            camera: CameraConfig::urban(),
            vehicle: VehicleParams::default(),
            simulation: SimSettings {
                urban: true,
                n_steps: 600,
                ..SimSettings::default()
            },
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "default" | "lane_keeping" => Some(Scenario::lane_keeping()),
            "urban" => Some(Scenario::urban()),
            _ => None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        toml::from_str(text).map_err(|e| SimError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    /// SHA-256 over the canonical JSON form.
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("scenario serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// Result of one [`World::advance`].
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub events: Vec<MisbehaviorEvent>,
    /// The step ran inside a post-reset cooldown window.
    pub cooldown: bool,
}

pub struct World {
    track: TrackModel,
    scene: Vec<SceneObject>,
    camera: CameraConfig,
    palette: Palette,
    params: VehicleParams,
    settings: SimSettings,
    detector: EventDetector,
    state: VehicleState,
    step: u64,
    cooldown: u32,
    pending_reset: bool,
    exec: Exec,
}

impl World {
    pub fn new(scenario: &Scenario) -> Result<Self, SimError> {
        let track = scenario.track.build()?;
        for obj in &scenario.objects {
            obj.validate(&track)?;
        }
        let cam = &scenario.camera;
        if cam.width == 0 || cam.height == 0 || cam.yaws.is_empty() {
            return Err(SimError::Config("camera needs non-zero size and ≥1 view".into()));
        }
        if !(scenario.simulation.dt > 0.0) {
            return Err(SimError::InvalidTimestep(scenario.simulation.dt));
        }
        let state = VehicleState::on_centerline(
            &track,
            scenario.simulation.start_s,
            scenario.simulation.initial_speed,
        );
        Ok(World {
            detector: EventDetector::new(&scenario.objects, scenario.simulation.urban),
            track,
            scene: scenario.objects.clone(),
            camera: scenario.camera.clone(),
            palette: Palette::simulator(),
            params: scenario.vehicle,
            settings: scenario.simulation.clone(),
            state,
            step: 0,
            cooldown: 0,
            pending_reset: false,
            exec: Exec::default(),
        })
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn track(&self) -> &TrackModel {
        &self.track
    }

    pub fn scene(&self) -> &[SceneObject] {
        &self.scene
    }

    pub fn palette(&self) -> &Palette {
        &self.palette
    }

    pub fn params(&self) -> &VehicleParams {
        &self.params
    }

    pub fn settings(&self) -> &SimSettings {
        &self.settings
    }

    pub fn state(&self) -> &VehicleState {
        &self.state
    }

    pub fn step_index(&self) -> u64 {
        self.step
    }

    pub fn in_cooldown(&self) -> bool {
        self.cooldown > 0
    }

    pub fn dt(&self) -> f64 {
        self.settings.dt
    }

    /// Render the current state.
    pub fn render(&self) -> Frame {
        self.render_state(&self.state)
    }

    pub fn render_state(&self, state: &VehicleState) -> Frame {
        Renderer {
            track: &self.track,
            scene: &self.scene,
            camera: &self.camera,
            palette: &self.palette,
        }
        .render(state, self.step, self.exec)
    }

    /// Apply `cmd` for one `dt`, detect events and reset after any report.
    pub fn advance(&mut self, cmd: &ControlCommand) -> Result<StepOutcome, SimError> {
        if self.settings.step_latency_ms > 0.0 {
            std::thread::sleep(Duration::from_secs_f64(self.settings.step_latency_ms / 1000.0));
        }
        let prev = self.state;
        let next = vehicle::step(&self.params, &self.track, &prev, cmd, self.settings.dt)?;
        let step = self.step;
        self.step += 1;
        self.state = next;
        let detected =
            self.detector
                .detect(&self.track, &self.scene, &prev, &next, step, self.params.radius);
        if self.cooldown > 0 {
            self.cooldown -= 1;
            return Ok(StepOutcome {
                events: Vec::new(),
                cooldown: true,
            });
        }
        if !detected.is_empty() {
            self.pending_reset = true;
            self.reset_after_event()?;
        }
        Ok(StepOutcome {
            events: detected,
            cooldown: false,
        })
    }

    /// Move the vehicle onto the centerline `RESET_ADVANCE_M` ahead, keeping
    /// speed, and start the cooldown. Only valid right after an event.
    pub fn reset_after_event(&mut self) -> Result<(), SimError> {
        if !self.pending_reset {
            return Err(SimError::NoPendingEvent);
        }
        let speed = self.state.speed;
        let steering = self.state.steering;
        let mut s = VehicleState::on_centerline(&self.track, self.state.s + RESET_ADVANCE_M, speed);
        s.steering = steering;
        self.state = s;
        self.cooldown = RESET_COOLDOWN_STEPS;
        self.pending_reset = false;
        Ok(())
    }

    /// Force a state (tests and tooling).
    pub fn set_state(&mut self, state: VehicleState) {
        self.state = state;
    }

    #[cfg(test)]
    pub(crate) fn mark_event_pending(&mut self) {
        self.pending_reset = true;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::events::EventKind;

    #[test]
    fn reset_moves_forward_onto_centerline() {
        let mut w = World::new(&Scenario::lane_keeping()).unwrap();
        assert_eq!(w.reset_after_event(), Err(SimError::NoPendingEvent));
        let mut st = VehicleState::on_centerline(w.track(), 100.0, 5.0);
        let p = w.track().pose_at(100.0);
        st.x -= 2.5 * p.heading.sin();
        st.y += 2.5 * p.heading.cos();
        st.cte = 2.5;
        w.set_state(st);
        w.mark_event_pending();
        w.reset_after_event().unwrap();
        assert!((w.state().s - 102.0).abs() < 1e-9);
        assert_eq!(w.state().cte, 0.0);
        assert_eq!(w.state().speed, 5.0);
        assert!(w.in_cooldown());
    }

    #[test]
    fn events_fire_then_cooldown_suppresses() {
        let mut w = World::new(&Scenario::lane_keeping()).unwrap();
        let mut st = *w.state();
        st.heading += 0.6;
        w.set_state(st);
        let hard_left = ControlCommand::new(0.5, 0.5, 0.5);
        let mut fired = Vec::new();
        let mut suppressed_steps = 0;
        for _ in 0..60 {
            let out = w.advance(&hard_left).unwrap();
            if out.cooldown {
                suppressed_steps += 1;
                assert!(out.events.is_empty());
            }
            fired.extend(out.events);
        }
        assert!(!fired.is_empty());
        assert_eq!(fired[0].kind, EventKind::Oob);
        assert!(suppressed_steps >= RESET_COOLDOWN_STEPS as usize);
    }

    #[test]
    fn scenario_toml_round_trip() {
        for sc in [Scenario::lane_keeping(), Scenario::urban()] {
            let text = sc.to_toml();
            let back = Scenario::from_toml(&text).unwrap();
            assert_eq!(back, sc);
            assert_eq!(back.content_hash(), sc.content_hash());
        }
        let minimal = Scenario::from_toml("name = \"x\"\n").unwrap();
        assert_eq!(minimal.track.n_sectors, 40);
        assert_eq!(minimal.simulation.n_steps, 2000);
        assert!(World::new(&minimal).is_ok());
    }

    #[test]
    fn bad_objects_rejected() {
        let mut sc = Scenario::lane_keeping();
        sc.objects.push(SceneObject::stop(10.0, 5.0));
        assert!(matches!(World::new(&sc), Err(SimError::InvalidScene(_))));
    }
}
