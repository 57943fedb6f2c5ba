//! Domain augmentation: procedural mocks of the three strategies, a client
//! for remote backends and a reference server.

pub mod domain;
pub mod remote;
pub mod server;
pub mod strategies;

pub use domain::{DomainSpec, Tone};
pub use remote::{remote_augment, RemoteAugmenter};
pub use server::{serve_augmenter, AugmentBackend, BackendOutput, BackendRequest, MockBackend};

use crate::exec::Exec;
use crate::image::ClassId;
use crate::protocol::TransportError;
use crate::sim::Frame;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("strategy needs a ground-truth mask for every view")]
    MissingMask,
    #[error("view and mask dimensions differ")]
    DimensionMismatch,
    #[error("unknown domain {0:?}")]
    UnknownDomain(String),
    #[error("invalid domain: {0}")]
    InvalidDomain(String),
    #[error("invalid augmentation parameters: {0}")]
    InvalidParams(String),
    #[error("unknown strategy {0:?}")]
    UnknownStrategy(String),
    #[error("backend failed: {0}")]
    Backend(String),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentParams {
    pub text_guidance: f64,
    pub image_guidance: f64,
    pub noise_level: f64,
    pub corrupt_base_prob: f64,
    pub seed: u64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            text_guidance: 10.0,
            image_guidance: 2.0,
            noise_level: 0.5,
            corrupt_base_prob: 0.0,
            seed: 0,
        }
    }
}

impl AugmentParams {
    pub fn with_seed(self, seed: u64) -> Self {
        AugmentParams { seed, ..self }
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        let bad = |m: &str| Err(AugmentError::InvalidParams(m.into()));
        if !(self.text_guidance >= 0.0 && self.text_guidance.is_finite()) {
            return bad("text_guidance must be finite and >= 0");
        }
        if !(self.image_guidance >= 0.0 && self.image_guidance.is_finite()) {
            return bad("image_guidance must be finite and >= 0");
        }
        if !(0.0..=1.0).contains(&self.noise_level) {
            return bad("noise_level must be in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.corrupt_base_prob) {
            return bad("corrupt_base_prob must be in [0, 1]");
        }
        Ok(())
    }
}

/// The three mock strategies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockStrategy {
    Instruction,
    Inpaint,
    Refine,
}

impl MockStrategy {
    pub const ALL: [MockStrategy; 3] = [MockStrategy::Instruction, MockStrategy::Inpaint, MockStrategy::Refine];

    pub fn name(self) -> &'static str {
        match self {
            MockStrategy::Instruction => "instruction",
            MockStrategy::Inpaint => "inpaint",
            MockStrategy::Refine => "refine",
        }
    }

    /// A `corrupt_base_prob` that makes the strategy's invalid rate track the
    /// filter rates observed for real diffusion backends at default params.
    pub fn typical_corrupt_rate(self) -> f64 {
        match self {
            MockStrategy::Instruction => 0.48,
            MockStrategy::Inpaint => 0.01,
            MockStrategy::Refine => 0.12,
        }
    }
}

impl fmt::Display for MockStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MockStrategy {
    type Err = AugmentError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MockStrategy::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| AugmentError::UnknownStrategy(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationResult {
    pub images: Vec<crate::image::Image>,
    /// Wall time seen by the caller, ms.
    pub elapsed_ms: f64,
    /// Time reported by a remote backend, ms.
    pub server_elapsed_ms: Option<f64>,
    pub seed_used: u64,
    pub retries: u32,
    /// Ground-truth validity; only mocks know it.
    pub gt_valid: Option<bool>,
}

fn timed(
    seed: u64,
    f: impl FnOnce() -> Result<strategies::MockOutput, AugmentError>,
) -> Result<AugmentationResult, AugmentError> {
    let t = Instant::now();
    let out = f()?;
    Ok(AugmentationResult {
        images: out.images,
        elapsed_ms: t.elapsed().as_secs_f64() * 1e3,
        server_elapsed_ms: None,
        seed_used: seed,
        retries: 0,
        gt_valid: Some(!out.corrupted),
    })
}

pub fn augment_instruction(
    frame: &Frame,
    domain: &DomainSpec,
    params: &AugmentParams,
) -> Result<AugmentationResult, AugmentError> {
    timed(params.seed, || {
        strategies::instruction(&frame.images(), domain, params, Exec::default())
    })
}

pub fn augment_inpaint(
    frame: &Frame,
    domain: &DomainSpec,
    params: &AugmentParams,
    preserved: &[ClassId],
) -> Result<AugmentationResult, AugmentError> {
    timed(params.seed, || {
        strategies::inpaint(
            &frame.images(),
            Some(&frame.masks()),
            domain,
            params,
            preserved,
            Exec::default(),
        )
    })
}

pub fn augment_refine(
    frame: &Frame,
    domain: &DomainSpec,
    params: &AugmentParams,
    preserved: &[ClassId],
) -> Result<AugmentationResult, AugmentError> {
    timed(params.seed, || {
        strategies::refine(
            &frame.images(),
            Some(&frame.masks()),
            domain,
            params,
            preserved,
            Exec::default(),
        )
    })
}

/// Anything that turns a simulator frame into augmented views.
pub trait Augmenter: Send {
    fn augment(&mut self, frame: &Frame, params: &AugmentParams) -> Result<AugmentationResult, AugmentError>;
    /// Short label for logs.
    fn label(&self) -> String;
}

/// In-process mock strategy.
#[derive(Debug, Clone)]
pub struct MockAugmenter {
    pub strategy: MockStrategy,
    pub domain: DomainSpec,
    pub preserved: Vec<ClassId>,
    pub exec: Exec,
}

impl MockAugmenter {
    pub fn new(strategy: MockStrategy, domain: DomainSpec) -> Self {
        MockAugmenter {
            strategy,
            domain,
            preserved: vec![ClassId::ROAD],
            exec: Exec::default(),
        }
    }

    pub fn preserving(mut self, preserved: &[ClassId]) -> Self {
        self.preserved = preserved.to_vec();
        self
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn run(
        &self,
        images: &[crate::image::Image],
        masks: Option<&[crate::image::SemanticMask]>,
        params: &AugmentParams,
    ) -> Result<strategies::MockOutput, AugmentError> {
        match self.strategy {
            MockStrategy::Instruction => strategies::instruction(images, &self.domain, params, self.exec),
            MockStrategy::Inpaint => {
                strategies::inpaint(images, masks, &self.domain, params, &self.preserved, self.exec)
            }
            MockStrategy::Refine => {
                strategies::refine(images, masks, &self.domain, params, &self.preserved, self.exec)
            }
        }
    }
}

impl Augmenter for MockAugmenter {
    fn augment(&mut self, frame: &Frame, params: &AugmentParams) -> Result<AugmentationResult, AugmentError> {
        let masks = frame.masks();
        timed(params.seed, || self.run(&frame.images(), Some(&masks), params))
    }

    fn label(&self) -> String {
        format!("{}/{}", self.strategy, self.domain.name)
    }
}
