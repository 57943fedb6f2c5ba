//! Client side of remote augmentation.

use super::{AugmentError, AugmentParams, AugmentationResult, Augmenter};
use crate::image::ClassId;
use crate::protocol::{
    self, AugmentRequest, ClientConfig, Connection, Message, TransportError, WireView,
};
use crate::sim::Frame;
use std::time::Instant;

/// Persistent connection to an augmentation server.
pub struct RemoteAugmenter {
    conn: Connection,
    endpoint: String,
    strategy: String,
    domain: String,
    preserved: Vec<ClassId>,
}

impl RemoteAugmenter {
    pub fn connect(
        endpoint: &str,
        strategy: &str,
        domain: &str,
        cfg: ClientConfig,
    ) -> Result<Self, AugmentError> {
        Ok(RemoteAugmenter {
            conn: Connection::connect(endpoint, cfg)?,
            endpoint: endpoint.to_string(),
            strategy: strategy.to_string(),
            domain: domain.to_string(),
            preserved: Vec::new(),
        })
    }

    pub fn preserving(mut self, preserved: &[ClassId]) -> Self {
        self.preserved = preserved.to_vec();
        self
    }
}

impl Augmenter for RemoteAugmenter {
    fn augment(&mut self, frame: &Frame, params: &AugmentParams) -> Result<AugmentationResult, AugmentError> {
        let t = Instant::now();
        let frame_id = self.conn.next_frame_id();
        let req = Message::AugmentRequest(AugmentRequest {
            version: protocol::VERSION,
            frame_id,
            strategy: self.strategy.clone(),
            domain: self.domain.clone(),
            params: *params,
            views: frame.views.iter().map(|v| WireView::encode(&v.image)).collect(),
            masks: frame.views.iter().map(|v| protocol::encode_mask(&v.mask)).collect(),
            preserved: self.preserved.clone(),
        });
        let resp = match self.conn.call(&req)? {
            Message::AugmentResponse(r) if r.frame_id == frame_id => r,
            other => return Err(TransportError::Unexpected(other.type_name().into()).into()),
        };
        let images = protocol::decode_views(&resp.views)?;
        if images.len() != frame.views.len() {
            return Err(TransportError::Malformed(format!(
                "sent {} views, got {} back",
                frame.views.len(),
                images.len()
            ))
            .into());
        }
        Ok(AugmentationResult {
            images,
            elapsed_ms: t.elapsed().as_secs_f64() * 1e3,
            server_elapsed_ms: Some(resp.elapsed_ms),
            seed_used: resp.seed_used,
            retries: 0,
            gt_valid: resp.gt_valid,
        })
    }

    fn label(&self) -> String {
        format!("remote:{}/{}@{}", self.strategy, self.domain, self.endpoint)
    }
}

/// One-shot request over a fresh connection.
pub fn remote_augment(
    endpoint: &str,
    frame: &Frame,
    domain: &str,
    strategy: &str,
    params: &AugmentParams,
    cfg: ClientConfig,
) -> Result<AugmentationResult, AugmentError> {
    RemoteAugmenter::connect(endpoint, strategy, domain, cfg)?.augment(frame, params)
}
