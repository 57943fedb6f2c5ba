//! Length-prefixed JSON wire protocol shared by remote augmenters and remote
//! agents.
//!
//! Each message is a 4-byte big-endian payload length followed by a JSON
//! object whose `type` field names the message. Images travel as base64
//! PPM, masks as base64 PGM.

use crate::augment::AugmentParams;
use crate::codec::{self, CodecError};
use crate::image::{ClassId, Image, SemanticMask};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};
use thiserror::Error;

pub const VERSION: u32 = 1;
/// Largest accepted payload (64 MiB).
pub const MAX_PAYLOAD: usize = 64 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("cannot connect to {addr}: {source}")]
    Connect { addr: String, source: io::Error },
    #[error("timed out waiting for {0}")]
    Timeout(String),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("payload of {size} bytes exceeds maximum {max}")]
    PayloadTooLarge { size: usize, max: usize },
    #[error("protocol version mismatch: peer speaks {got}, expected {expected}")]
    VersionMismatch { got: u64, expected: u32 },
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("remote error ({kind:?}): {message}")]
    Remote { kind: ErrorKind, message: String },
    #[error("unexpected message: {0}")]
    Unexpected(String),
    #[error("connection closed by peer")]
    Closed,
    #[error(transparent)]
    Codec(#[from] CodecError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireView {
    pub width: usize,
    pub height: usize,
    pub ppm_base64: String,
}

impl WireView {
    pub fn encode(image: &Image) -> Self {
        WireView {
            width: image.width(),
            height: image.height(),
            ppm_base64: B64.encode(codec::encode_ppm(image)),
        }
    }

    pub fn decode(&self) -> Result<Image, TransportError> {
        let bytes = B64
            .decode(&self.ppm_base64)
            .map_err(|e| TransportError::Malformed(format!("view base64: {e}")))?;
        let img = codec::decode_ppm(&bytes)?;
        if img.dims() != (self.width, self.height) {
            return Err(TransportError::Malformed(format!(
                "view declared {}x{} but carries {}x{}",
                self.width,
                self.height,
                img.width(),
                img.height()
            )));
        }
        Ok(img)
    }
}

pub fn encode_mask(mask: &SemanticMask) -> String {
    B64.encode(codec::encode_pgm(mask))
}

pub fn decode_mask(text: &str) -> Result<SemanticMask, TransportError> {
    let bytes = B64
        .decode(text)
        .map_err(|e| TransportError::Malformed(format!("mask base64: {e}")))?;
    Ok(codec::decode_pgm(&bytes, &ClassId::ALL)?)
}

pub fn decode_views(views: &[WireView]) -> Result<Vec<Image>, TransportError> {
    views.iter().map(WireView::decode).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentRequest {
    pub version: u32,
    pub frame_id: u64,
    pub strategy: String,
    pub domain: String,
    pub params: AugmentParams,
    pub views: Vec<WireView>,
    #[serde(default)]
    pub masks: Vec<String>,
    /// Classes an inpainting backend must keep; empty means its default.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub preserved: Vec<ClassId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentResponse {
    pub frame_id: u64,
    pub views: Vec<WireView>,
    pub elapsed_ms: f64,
    pub seed_used: u64,
    /// Ground-truth validity, only sent by mock backends.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_valid: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentAct {
    pub version: u32,
    pub frame_id: u64,
    pub views: Vec<WireView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentReply {
    pub frame_id: u64,
    pub steering_target: f64,
    pub throttle: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    VersionMismatch,
    PayloadTooLarge,
    Malformed,
    Backend,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReply {
    #[serde(default)]
    pub frame_id: Option<u64>,
    pub kind: ErrorKind,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Message {
    AugmentRequest(AugmentRequest),
    AugmentResponse(AugmentResponse),
    AgentAct(AgentAct),
    AgentReply(AgentReply),
    Error(ErrorReply),
}

impl Message {
    pub fn type_name(&self) -> &'static str {
        match self {
            Message::AugmentRequest(_) => "augment_request",
            Message::AugmentResponse(_) => "augment_response",
            Message::AgentAct(_) => "agent_act",
            Message::AgentReply(_) => "agent_reply",
            Message::Error(_) => "error",
        }
    }
}

pub fn write_frame<W: Write>(w: &mut W, payload: &[u8], max: usize) -> Result<(), TransportError> {
    if payload.len() > max || payload.len() > u32::MAX as usize {
        return Err(TransportError::PayloadTooLarge {
            size: payload.len(),
            max,
        });
    }
    w.write_all(&(payload.len() as u32).to_be_bytes())?;
    w.write_all(payload)?;
    w.flush()?;
    Ok(())
}

fn map_timeout(e: io::Error, what: &str) -> TransportError {
    match e.kind() {
        io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => TransportError::Timeout(what.into()),
        io::ErrorKind::UnexpectedEof => TransportError::Closed,
        _ => TransportError::Io(e),
    }
}

/// Read one frame. `Ok(None)` on a clean close before the length prefix.
pub fn read_frame<R: Read>(r: &mut R, max: usize) -> Result<Option<Vec<u8>>, TransportError> {
    let mut len = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut len[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(TransportError::Closed),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(map_timeout(e, "frame header")),
        }
    }
    let size = u32::from_be_bytes(len) as usize;
    if size > max {
        return Err(TransportError::PayloadTooLarge { size, max });
    }
    let mut buf = vec![0u8; size];
    r.read_exact(&mut buf).map_err(|e| map_timeout(e, "frame payload"))?;
    Ok(Some(buf))
}

/// Parse a payload, checking `version` (when present) before the full decode.
pub fn parse_message(payload: &[u8]) -> Result<Message, TransportError> {
    let value: serde_json::Value =
        serde_json::from_slice(payload).map_err(|e| TransportError::Malformed(e.to_string()))?;
    if let Some(v) = value.get("version") {
        let got = v.as_u64().unwrap_or(0);
        if got != VERSION as u64 {
            return Err(TransportError::VersionMismatch {
                got,
                expected: VERSION,
            });
        }
    }
    serde_json::from_value(value).map_err(|e| TransportError::Malformed(e.to_string()))
}

pub fn write_message<W: Write>(w: &mut W, msg: &Message, max: usize) -> Result<(), TransportError> {
    let payload = serde_json::to_vec(msg).expect("messages serialize");
    write_frame(w, &payload, max)
}

#[derive(Debug, Clone)]
pub struct ClientConfig {
    pub connect_timeout: Duration,
    pub io_timeout: Duration,
    pub max_payload: usize,
}

impl Default for ClientConfig {
    fn default() -> Self {
        ClientConfig {
            connect_timeout: Duration::from_secs(5),
            io_timeout: Duration::from_secs(120),
            max_payload: MAX_PAYLOAD,
        }
    }
}

/// Blocking request/response connection.
pub struct Connection {
    stream: TcpStream,
    cfg: ClientConfig,
    next_id: u64,
}

impl Connection {
    pub fn connect(addr: &str, cfg: ClientConfig) -> Result<Self, TransportError> {
        let connect_err = |source| TransportError::Connect {
            addr: addr.to_string(),
            source,
        };
        let addrs: Vec<SocketAddr> = addr.to_socket_addrs().map_err(connect_err)?.collect();
        let mut last = None;
        for a in addrs {
            match TcpStream::connect_timeout(&a, cfg.connect_timeout) {
                Ok(stream) => {
                    stream.set_read_timeout(Some(cfg.io_timeout))?;
                    stream.set_write_timeout(Some(cfg.io_timeout))?;
                    stream.set_nodelay(true)?;
                    return Ok(Connection {
                        stream,
                        cfg,
                        next_id: 0,
                    });
                }
                Err(e) => last = Some(e),
            }
        }
        Err(connect_err(last.unwrap_or_else(|| {
            io::Error::new(io::ErrorKind::NotFound, "address resolved to nothing")
        })))
    }

    pub fn next_frame_id(&mut self) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        id
    }

    /// Send one message and wait for the reply. Error replies become
    /// [`TransportError::Remote`].
    pub fn call(&mut self, msg: &Message) -> Result<Message, TransportError> {
        write_message(&mut self.stream, msg, self.cfg.max_payload)?;
        let payload = read_frame(&mut self.stream, self.cfg.max_payload)?.ok_or(TransportError::Closed)?;
        match parse_message(&payload)? {
            Message::Error(e) => Err(TransportError::Remote {
                kind: e.kind,
                message: e.message,
            }),
            other => Ok(other),
        }
    }
}

/// Request handler run by [`serve`]. `conn` identifies the connection so
/// stateful handlers can keep per-client state.
pub trait Handler: Send + Sync + 'static {
    fn handle(&self, conn: u64, msg: Message) -> Message;
}

/// One handled request as seen by the server clock.
#[derive(Debug, Clone, Copy)]
pub struct Exchange {
    pub conn: u64,
    pub frame_id: Option<u64>,
    pub received: Instant,
    pub replied: Instant,
}

#[derive(Debug, Clone)]
pub struct ServerOptions {
    pub max_payload: usize,
    pub record_timeline: bool,
}

impl Default for ServerOptions {
    fn default() -> Self {
        ServerOptions {
            max_payload: MAX_PAYLOAD,
            record_timeline: true,
        }
    }
}

pub struct ServerHandle {
    addr: SocketAddr,
    shutdown: Arc<AtomicBool>,
    timeline: Arc<Mutex<Vec<Exchange>>>,
    thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn timeline(&self) -> Vec<Exchange> {
        self.timeline.lock().expect("timeline lock").clone()
    }

    /// Block until the accept loop ends.
    pub fn join(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        // wake the blocking accept
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_millis(200));
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if self.thread.is_some() {
            self.stop();
        }
    }
}

fn error_reply(frame_id: Option<u64>, err: &TransportError) -> Message {
    let kind = match err {
        TransportError::VersionMismatch { .. } => ErrorKind::VersionMismatch,
        TransportError::PayloadTooLarge { .. } => ErrorKind::PayloadTooLarge,
        _ => ErrorKind::Malformed,
    };
    Message::Error(ErrorReply {
        frame_id,
        kind,
        message: err.to_string(),
    })
}

fn frame_id_of(msg: &Message) -> Option<u64> {
    match msg {
        Message::AugmentRequest(r) => Some(r.frame_id),
        Message::AugmentResponse(r) => Some(r.frame_id),
        Message::AgentAct(r) => Some(r.frame_id),
        Message::AgentReply(r) => Some(r.frame_id),
        Message::Error(e) => e.frame_id,
    }
}

fn serve_connection(
    mut stream: TcpStream,
    conn: u64,
    handler: Arc<dyn Handler>,
    opts: ServerOptions,
    timeline: Arc<Mutex<Vec<Exchange>>>,
) {
    let _ = stream.set_nodelay(true);
    loop {
        let payload = match read_frame(&mut stream, opts.max_payload) {
            Ok(Some(p)) => p,
            Ok(None) => return,
            Err(e @ TransportError::PayloadTooLarge { .. }) => {
                let _ = write_message(&mut stream, &error_reply(None, &e), opts.max_payload);
                return;
            }
            Err(e) => {
                log::debug!("connection {conn}: {e}");
                return;
            }
        };
        let received = Instant::now();
        let reply = match parse_message(&payload) {
            Ok(msg) => {
                let id = frame_id_of(&msg);
                (id, handler.handle(conn, msg))
            }
            Err(e) => (None, error_reply(None, &e)),
        };
        let (frame_id, reply) = reply;
        // logged before the write so a client that saw the reply also sees the entry
        if opts.record_timeline {
            timeline.lock().expect("timeline lock").push(Exchange {
                conn,
                frame_id,
                received,
                replied: Instant::now(),
            });
        }
        let sent = write_message(&mut stream, &reply, opts.max_payload);
        if let Err(e) = sent {
            log::debug!("connection {conn}: reply failed: {e}");
            return;
        }
    }
}

/// Bind `listen` and serve connections on background threads: requests on
/// one connection are handled in order, connections run concurrently.
pub fn serve(
    listen: &str,
    handler: Arc<dyn Handler>,
    opts: ServerOptions,
) -> Result<ServerHandle, TransportError> {
    let listener = TcpListener::bind(listen).map_err(|source| TransportError::Connect {
        addr: listen.to_string(),
        source,
    })?;
    let addr = listener.local_addr()?;
    let shutdown = Arc::new(AtomicBool::new(false));
    let timeline = Arc::new(Mutex::new(Vec::new()));
    let ids = AtomicU64::new(0);
    let (flag, tl) = (shutdown.clone(), timeline.clone());
    let thread = std::thread::Builder::new()
        .name(format!("adstest-server-{addr}"))
        .spawn(move || {
            for stream in listener.incoming() {
                if flag.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let conn = ids.fetch_add(1, Ordering::SeqCst);
                let (h, o, t) = (handler.clone(), opts.clone(), tl.clone());
                std::thread::spawn(move || serve_connection(stream, conn, h, o, t));
            }
        })?;
    Ok(ServerHandle {
        addr,
        shutdown,
        timeline,
        thread: Some(thread),
    })
}
