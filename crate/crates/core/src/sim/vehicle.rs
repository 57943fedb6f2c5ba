//! Kinematic bicycle vehicle.

use super::track::TrackModel;
use super::SimError;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VehicleParams {
    /// m
    pub wheelbase: f64,
    /// rad
    pub steering_limit: f64,
    /// rad/s
    pub steering_slew: f64,
    /// Speed reached at full throttle, m/s.
    pub max_speed: f64,
    /// First-order speed response time constant, s.
    pub speed_tau: f64,
    /// Collision disc radius, m.
    pub radius: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        VehicleParams {
            wheelbase: 2.5,
            steering_limit: 0.5,
            steering_slew: 2.0,
            max_speed: 10.0,
            speed_tau: 1.0,
            radius: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
    /// Front wheel angle, positive steers left.
    pub steering: f64,
    pub s: f64,
    /// Lateral offset from centerline, left positive.
    pub cte: f64,
}

/// Actuation request from an agent. Steering uses the vehicle convention
/// (positive is a left turn); throttle is normalized to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlCommand {
    pub steering_target: f64,
    pub throttle: f64,
}

impl ControlCommand {
    pub fn new(steering_target: f64, throttle: f64, steering_limit: f64) -> Self {
        ControlCommand {
            steering_target: steering_target.clamp(-steering_limit, steering_limit),
            throttle: throttle.clamp(0.0, 1.0),
        }
    }
}

impl VehicleState {
    /// State at arclength `s` on the centerline, tangent heading.
    pub fn on_centerline(track: &TrackModel, s: f64, speed: f64) -> Self {
        let s = track.wrap_s(s);
        let p = track.pose_at(s);
        VehicleState {
            x: p.x,
            y: p.y,
            heading: p.heading,
            speed,
            steering: 0.0,
            s,
            cte: 0.0,
        }
    }
}

/// Pose update only: integrates position and heading with the current speed
/// and wheel angle, then relaxes speed toward the throttle target and slews
/// the wheel toward the steering target. `s` and `cte` are left untouched.
pub fn integrate(
    params: &VehicleParams,
    state: &VehicleState,
    cmd: &ControlCommand,
    dt: f64,
) -> VehicleState {
    let mut next = *state;
    let v = state.speed;
    next.x += v * state.heading.cos() * dt;
    next.y += v * state.heading.sin() * dt;
    next.heading += v / params.wheelbase * state.steering.tan() * dt;

    let target_speed = cmd.throttle.clamp(0.0, 1.0) * params.max_speed;
    let alpha = (dt / params.speed_tau).min(1.0);
    next.speed = (v + (target_speed - v) * alpha).max(0.0);

    let target = cmd
        .steering_target
        .clamp(-params.steering_limit, params.steering_limit);
    let max_delta = params.steering_slew * dt;
    let delta = (target - state.steering).clamp(-max_delta, max_delta);
    next.steering = (state.steering + delta).clamp(-params.steering_limit, params.steering_limit);
    next
}

/// Full step: bicycle integration followed by centerline projection.
pub fn step(
    params: &VehicleParams,
    track: &TrackModel,
    state: &VehicleState,
    cmd: &ControlCommand,
    dt: f64,
) -> Result<VehicleState, SimError> {
    if !(dt > 0.0) {
        return Err(SimError::InvalidTimestep(dt));
    }
    let mut next = integrate(params, state, cmd, dt);
    let p = track.project(next.x, next.y)?;
    next.s = p.s;
    next.cte = p.lateral;
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn st(speed: f64, steering: f64) -> VehicleState {
        VehicleState {
            x: 10.0,
            y: 0.0,
            heading: 0.0,
            speed,
            steering,
            s: 10.0,
            cte: 0.0,
        }
    }

    #[test]
    fn zero_speed_keeps_pose() {
        let p = VehicleParams::default();
        let s0 = st(0.0, 0.3);
        let cmd = ControlCommand::new(-0.4, 0.0, 0.5);
        let n = integrate(&p, &s0, &cmd, 0.1);
        assert_eq!((n.x, n.y, n.heading), (s0.x, s0.y, s0.heading));
    }

    #[test]
    fn straight_motion() {
        let p = VehicleParams::default();
        let s0 = st(1.0, 0.0);
        // throttle holding 1 m/s
        let cmd = ControlCommand::new(0.0, 0.1, 0.5);
        let n = integrate(&p, &s0, &cmd, 0.1);
        assert!((n.x - 10.1).abs() < 1e-12);
        assert_eq!(n.y, 0.0);
        assert_eq!(n.heading, 0.0);
        assert!((n.speed - 1.0).abs() < 1e-12);
    }

    #[test]
    fn yaw_rate_follows_bicycle_model() {
        // v tan(δ) / L = 1 rad/s when tan δ = L and v = 1
        let p = VehicleParams {
            steering_limit: 1.5,
            ..Default::default()
        };
        let delta = p.wheelbase.atan();
        let s0 = st(1.0, delta);
        let cmd = ControlCommand::new(delta, 0.1, 1.5);
        let n = integrate(&p, &s0, &cmd, 0.1);
        assert!((n.heading - 0.1).abs() < 1e-12);
    }

    #[test]
    fn steering_slews_and_clamps() {
        let p = VehicleParams::default();
        let s0 = st(5.0, 0.0);
        let cmd = ControlCommand::new(2.0, 0.5, 10.0);
        let n = integrate(&p, &s0, &cmd, 0.1);
        assert!((n.steering - 0.2).abs() < 1e-12);
        let mut s = s0;
        for _ in 0..10 {
            s = integrate(&p, &s, &cmd, 0.1);
        }
        assert!((s.steering - 0.5).abs() < 1e-12);
    }

    #[test]
    fn step_reprojects() {
        let track = TrackModel::default_track();
        let p = VehicleParams::default();
        let s0 = VehicleState::on_centerline(&track, 5.0, 5.0);
        let cmd = ControlCommand::new(0.0, 0.5, 0.5);
        let n = step(&p, &track, &s0, &cmd, 0.1).unwrap();
        assert!((n.s - 5.5).abs() < 1e-9);
        assert!(n.cte.abs() < 1e-12);
        assert!(matches!(
            step(&p, &track, &s0, &cmd, 0.0),
            Err(SimError::InvalidTimestep(_))
        ));
    }
}
