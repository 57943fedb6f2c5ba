//! Closed-loop, system-level testing harness for vision-based driving agents.
//!
//! Every simulator camera frame can be pushed through a domain augmentation
//! backend, checked for semantic consistency against the simulator's ground
//! truth masks, and only then handed to the agent under test. Slow backends
//! can be distilled into fast students, and runs are scored against a
//! nominal (unaugmented) baseline.
//!
//! Module map:
//!
//! - [`image`], [`codec`], [`palette`], [`dataset`]: shared pixel types, PPM/PGM
//!   codecs, the palette segmenter and on-disk dataset layout.
//! - [`sim`]: deterministic kinematic world with a sectored closed track.
//! - [`agents`]: the systems under test.
//! - [`augment`] and [`protocol`]: augmentation strategies, the framed wire
//!   protocol, client and reference server.
//! - [`validator`]: per-class mask similarity, retry loop, calibration and
//!   confusion matrices.
//! - [`distill`]: teacher/student pipeline with Fréchet checkpoint selection.
//! - [`domain_distance`]: reconstruction-error domain categorization.
//! - [`metrics`]: run logs and failure / driving-quality reports.
//! - [`campaign`]: the synchronous campaign loop and baseline handling.
//! - [`exec`]: rayon-backed data parallelism with a sequential fallback.

pub mod agents;
pub mod augment;
pub mod campaign;
pub mod codec;
pub mod dataset;
pub mod distill;
pub mod domain_distance;
pub mod exec;
pub mod image;
pub mod metrics;
pub mod palette;
pub mod protocol;
pub mod rng;
pub mod sim;
pub mod validator;

pub use exec::Exec;
pub use image::{ClassId, Image, Rgb, SemanticMask};
pub use palette::Palette;
