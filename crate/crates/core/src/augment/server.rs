//! Reference augmentation server.

use super::domain::DomainSpec;
use super::{AugmentError, AugmentParams, MockAugmenter, MockStrategy};
use crate::exec::Exec;
use crate::image::{ClassId, Image, SemanticMask};
use crate::protocol::{
    self, AugmentRequest, AugmentResponse, ErrorKind, ErrorReply, Handler, Message, ServerHandle,
    ServerOptions, WireView,
};
use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

#[derive(Debug, Clone)]
pub struct BackendRequest {
    pub strategy: String,
    pub domain: String,
    pub params: AugmentParams,
    pub images: Vec<Image>,
    pub masks: Vec<SemanticMask>,
    /// Empty means the backend's default.
    pub preserved: Vec<ClassId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackendOutput {
    pub images: Vec<Image>,
    pub gt_valid: Option<bool>,
}

/// What a server runs per request. Implementations must be thread-safe since
/// connections are served concurrently.
pub trait AugmentBackend: Send + Sync + 'static {
    fn augment(&self, req: &BackendRequest) -> Result<BackendOutput, AugmentError>;
}

/// Serves the in-process mock strategies.
#[derive(Debug, Clone)]
pub struct MockBackend {
    domains: BTreeMap<String, DomainSpec>,
    exec: Exec,
}

impl Default for MockBackend {
    fn default() -> Self {
        MockBackend {
            domains: DomainSpec::builtins()
                .into_iter()
                .map(|d| (d.name.clone(), d))
                .collect(),
            exec: Exec::default(),
        }
    }
}

impl MockBackend {
    pub fn with_domain(mut self, domain: DomainSpec) -> Self {
        self.domains.insert(domain.name.clone(), domain);
        self
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }
}

impl AugmentBackend for MockBackend {
    fn augment(&self, req: &BackendRequest) -> Result<BackendOutput, AugmentError> {
        let strategy: MockStrategy = req.strategy.parse()?;
        let domain = self
            .domains
            .get(&req.domain)
            .ok_or_else(|| AugmentError::UnknownDomain(req.domain.clone()))?;
        let mut aug = MockAugmenter::new(strategy, domain.clone()).with_exec(self.exec);
        if !req.preserved.is_empty() {
            aug = aug.preserving(&req.preserved);
        }
        let masks = (!req.masks.is_empty()).then_some(&req.masks[..]);
        let out = aug.run(&req.images, masks, &req.params)?;
        Ok(BackendOutput {
            images: out.images,
            gt_valid: Some(!out.corrupted),
        })
    }
}

struct AugmentService {
    backend: Arc<dyn AugmentBackend>,
    latency: Duration,
}

impl AugmentService {
    fn run(&self, req: AugmentRequest) -> Result<AugmentResponse, (ErrorKind, String)> {
        let t = Instant::now();
        let malformed = |e: protocol::TransportError| (ErrorKind::Malformed, e.to_string());
        let images = protocol::decode_views(&req.views).map_err(malformed)?;
        let masks = req
            .masks
            .iter()
            .map(|m| protocol::decode_mask(m))
            .collect::<Result<Vec<_>, _>>()
            .map_err(malformed)?;
        let out = self
            .backend
            .augment(&BackendRequest {
                strategy: req.strategy,
                domain: req.domain,
                params: req.params,
                images,
                masks,
                preserved: req.preserved,
            })
            .map_err(|e| (ErrorKind::Backend, e.to_string()))?;
        if !self.latency.is_zero() {
            std::thread::sleep(self.latency);
        }
        Ok(AugmentResponse {
            frame_id: req.frame_id,
            views: out.images.iter().map(WireView::encode).collect(),
            elapsed_ms: t.elapsed().as_secs_f64() * 1e3,
            seed_used: req.params.seed,
            gt_valid: out.gt_valid,
        })
    }
}

impl Handler for AugmentService {
    fn handle(&self, _conn: u64, msg: Message) -> Message {
        let Message::AugmentRequest(req) = msg else {
            return Message::Error(ErrorReply {
                frame_id: None,
                kind: ErrorKind::Malformed,
                message: format!("expected augment_request, got {}", msg.type_name()),
            });
        };
        let frame_id = req.frame_id;
        match self.run(req) {
            Ok(resp) => Message::AugmentResponse(resp),
            Err((kind, message)) => Message::Error(ErrorReply {
                frame_id: Some(frame_id),
                kind,
                message,
            }),
        }
    }
}

/// Serve `backend` on `listen`, sleeping `latency_ms` per request before
/// replying. The returned handle stops the server when shut down or dropped.
pub fn serve_augmenter(
    listen: &str,
    backend: Arc<dyn AugmentBackend>,
    latency_ms: f64,
) -> Result<ServerHandle, AugmentError> {
    let service = AugmentService {
        backend,
        latency: Duration::from_secs_f64(latency_ms.max(0.0) / 1000.0),
    };
    Ok(protocol::serve(listen, Arc::new(service), ServerOptions::default())?)
}
