//! Image-consuming controllers under test.
//!
//! Agents receive camera images only. The mask-driven agent re-segments the
//! pixels itself, so anything an augmentation does to the image reaches its
//! steering.

use crate::image::{luminance, ClassId, Image};
use crate::palette::Palette;
use crate::protocol::{
    self, AgentAct, AgentReply, ClientConfig, Connection, ErrorKind, ErrorReply, Handler, Message,
    ServerHandle, ServerOptions, TransportError, WireView,
};
use crate::sim::ControlCommand;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::Duration;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("invalid agent spec: {0}")]
    InvalidSpec(String),
    #[error("frame has no views")]
    NoViews,
    #[error("frame is {got:?}, agent expects {expected:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error(transparent)]
    Transport(#[from] TransportError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    PurePursuitMask,
    BrightnessFragile,
    Remote,
}

/// Agent configuration. Fields irrelevant to `kind` are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentSpec {
    pub kind: AgentKind,
    /// Steering gain. Negative because image columns grow to the vehicle's
    /// right while positive steering turns left.
    pub gain: f64,
    /// Lookahead row band as fractions of image height, `[top, bottom)`.
    pub lookahead: [f64; 2],
    pub throttle: f64,
    pub steering_limit: f64,
    /// Luminance at or above which `brightness_fragile` calls a pixel road.
    pub brightness_threshold: f64,
    /// Which camera view steers.
    pub view: usize,
    pub endpoint: Option<String>,
    pub timeout_ms: u64,
}

impl Default for AgentSpec {
    fn default() -> Self {
        AgentSpec {
            kind: AgentKind::PurePursuitMask,
            gain: -1.2,
            lookahead: [0.5, 0.75],
            throttle: 0.5,
            steering_limit: 0.5,
            brightness_threshold: 120.0,
            view: 0,
            endpoint: None,
            timeout_ms: 30_000,
        }
    }
}

impl AgentSpec {
    pub fn pure_pursuit() -> Self {
        AgentSpec::default()
    }

    pub fn brightness_fragile() -> Self {
        AgentSpec {
            kind: AgentKind::BrightnessFragile,
            ..AgentSpec::default()
        }
    }

    pub fn remote(endpoint: impl Into<String>) -> Self {
        AgentSpec {
            kind: AgentKind::Remote,
            endpoint: Some(endpoint.into()),
            ..AgentSpec::default()
        }
    }

    pub fn validate(&self) -> Result<(), AgentError> {
        let bad = |m: &str| Err(AgentError::InvalidSpec(m.to_string()));
        let [top, bottom] = self.lookahead;
        if !(0.0..1.0).contains(&top) || !(top < bottom && bottom <= 1.0) {
            return bad("lookahead must satisfy 0 <= top < bottom <= 1");
        }
        if !self.gain.is_finite() {
            return bad("gain must be finite");
        }
        if !(0.0..=1.0).contains(&self.throttle) {
            return bad("throttle must be in [0, 1]");
        }
        if !(self.steering_limit > 0.0) {
            return bad("steering_limit must be positive");
        }
        if self.kind == AgentKind::Remote && self.endpoint.as_deref().unwrap_or("").is_empty() {
            return bad("remote agent needs an endpoint");
        }
        Ok(())
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            AgentKind::PurePursuitMask => "pure_pursuit_mask",
            AgentKind::BrightnessFragile => "brightness_fragile",
            AgentKind::Remote => "remote",
        }
    }

    pub fn build(&self) -> Result<Box<dyn Agent>, AgentError> {
        self.validate()?;
        Ok(match self.kind {
            AgentKind::PurePursuitMask => Box::new(CentroidAgent::new(
                self.clone(),
                RoadDetector::Palette(Palette::simulator()),
            )),
            AgentKind::BrightnessFragile => Box::new(CentroidAgent::new(
                self.clone(),
                RoadDetector::Brightness(self.brightness_threshold),
            )),
            AgentKind::Remote => Box::new(RemoteAgent::connect(self)?),
        })
    }
}

pub trait Agent: Send {
    /// Produce a command from the camera views of one step.
    fn act(&mut self, views: &[Image]) -> Result<ControlCommand, AgentError>;
    fn name(&self) -> &str;
}

#[derive(Debug, Clone)]
pub enum RoadDetector {
    Palette(Palette),
    Brightness(f64),
}

impl RoadDetector {
    pub fn is_road(&self, px: [u8; 3]) -> bool {
        match self {
            RoadDetector::Palette(p) => p.classify(px) == ClassId::ROAD,
            RoadDetector::Brightness(t) => luminance(px) >= *t,
        }
    }
}

/// Mean column of road pixels (pixel centers) inside rows `[top, bottom)`.
pub fn road_centroid(image: &Image, rows: (usize, usize), road: &RoadDetector) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for y in rows.0..rows.1.min(image.height()) {
        for x in 0..image.width() {
            if road.is_road(image.get(x, y)) {
                sum += x as f64 + 0.5;
                n += 1;
            }
        }
    }
    (n > 0).then(|| sum / n as f64)
}

pub fn steering_from_centroid(gain: f64, centroid: f64, width: usize) -> f64 {
    gain * (2.0 * centroid / width as f64 - 1.0)
}

/// Pure-pursuit on the road centroid; used by both local agent kinds.
pub struct CentroidAgent {
    spec: AgentSpec,
    road: RoadDetector,
    prev_steering: f64,
    dims: Option<(usize, usize)>,
}

impl CentroidAgent {
    pub fn new(spec: AgentSpec, road: RoadDetector) -> Self {
        CentroidAgent {
            spec,
            road,
            prev_steering: 0.0,
            dims: None,
        }
    }

    pub fn previous_steering(&self) -> f64 {
        self.prev_steering
    }

    fn band(&self, height: usize) -> (usize, usize) {
        let h = height as f64;
        let top = (self.spec.lookahead[0] * h).floor() as usize;
        let bottom = ((self.spec.lookahead[1] * h).ceil() as usize).max(top + 1);
        (top, bottom.min(height))
    }
}

impl Agent for CentroidAgent {
    fn act(&mut self, views: &[Image]) -> Result<ControlCommand, AgentError> {
        let img = views.get(self.spec.view).ok_or(AgentError::NoViews)?;
        match self.dims {
            Some(d) if d != img.dims() => {
                return Err(AgentError::DimensionMismatch {
                    expected: d,
                    got: img.dims(),
                })
            }
            None => self.dims = Some(img.dims()),
            _ => {}
        }
        let steering = match road_centroid(img, self.band(img.height()), &self.road) {
            Some(c) => steering_from_centroid(self.spec.gain, c, img.width()),
            None => self.prev_steering,
        };
        let cmd = ControlCommand::new(steering, self.spec.throttle, self.spec.steering_limit);
        self.prev_steering = cmd.steering_target;
        Ok(cmd)
    }

    fn name(&self) -> &str {
        self.spec.name()
    }
}

/// Forwards frames to an agent served over the wire protocol.
pub struct RemoteAgent {
    conn: Connection,
    limit: f64,
}

impl RemoteAgent {
    pub fn connect(spec: &AgentSpec) -> Result<Self, AgentError> {
        let endpoint = spec
            .endpoint
            .as_deref()
            .ok_or_else(|| AgentError::InvalidSpec("remote agent needs an endpoint".into()))?;
        let cfg = ClientConfig {
            io_timeout: Duration::from_millis(spec.timeout_ms.max(1)),
            ..ClientConfig::default()
        };
        Ok(RemoteAgent {
            conn: Connection::connect(endpoint, cfg)?,
            limit: spec.steering_limit,
        })
    }
}

impl Agent for RemoteAgent {
    fn act(&mut self, views: &[Image]) -> Result<ControlCommand, AgentError> {
        let frame_id = self.conn.next_frame_id();
        let msg = Message::AgentAct(AgentAct {
            version: protocol::VERSION,
            frame_id,
            views: views.iter().map(WireView::encode).collect(),
        });
        match self.conn.call(&msg)? {
            Message::AgentReply(r) if r.frame_id == frame_id => {
                Ok(ControlCommand::new(r.steering_target, r.throttle, self.limit))
            }
            other => Err(TransportError::Unexpected(other.type_name().into()).into()),
        }
    }

    fn name(&self) -> &str {
        "remote"
    }
}

struct AgentService {
    spec: AgentSpec,
    agents: Mutex<HashMap<u64, Box<dyn Agent>>>,
}

impl Handler for AgentService {
    fn handle(&self, conn: u64, msg: Message) -> Message {
        let err = |frame_id, kind, message: String| {
            Message::Error(ErrorReply {
                frame_id,
                kind,
                message,
            })
        };
        let Message::AgentAct(act) = msg else {
            return err(None, ErrorKind::Malformed, format!("expected agent_act, got {}", msg.type_name()));
        };
        let views = match protocol::decode_views(&act.views) {
            Ok(v) => v,
            Err(e) => return err(Some(act.frame_id), ErrorKind::Malformed, e.to_string()),
        };
        let mut agents = self.agents.lock().expect("agent table lock");
        if !agents.contains_key(&conn) {
            match self.spec.build() {
                Ok(a) => {
                    agents.insert(conn, a);
                }
                Err(e) => return err(Some(act.frame_id), ErrorKind::Backend, e.to_string()),
            }
        }
        let agent = agents.get_mut(&conn).expect("just inserted");
        match agent.act(&views) {
            Ok(cmd) => Message::AgentReply(AgentReply {
                frame_id: act.frame_id,
                steering_target: cmd.steering_target,
                throttle: cmd.throttle,
            }),
            Err(e) => err(Some(act.frame_id), ErrorKind::Backend, e.to_string()),
        }
    }
}

/// Serve a local agent kind over the protocol; each connection gets its own
/// agent instance.
pub fn serve_agent(listen: &str, spec: AgentSpec) -> Result<ServerHandle, AgentError> {
    if spec.kind == AgentKind::Remote {
        return Err(AgentError::InvalidSpec("cannot serve a remote agent".into()));
    }
    spec.validate()?;
    let service = AgentService {
        spec,
        agents: Mutex::new(HashMap::new()),
    };
    Ok(protocol::serve(listen, Arc::new(service), ServerOptions::default())?)
}
