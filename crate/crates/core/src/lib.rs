//! Cross-view object detection toolkit: synthetic paired scenes, a small
//! grid detector with complexity-aware pathway aggregation, a paired-sampling
//! curriculum and COCO-style evaluation.

/// Crate version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub mod curriculum;
pub mod detector;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod numerics;
pub mod pathways;
pub mod stats;
pub mod synth;

pub use curriculum::{PairedDataset, Sampler, Schedule};
pub use detector::{DetectorParams, Mode, Model, TrainConfig};
pub use error::{Error, Result};
pub use eval::{Detection, EvalReport, ViewMetrics};
pub use geometry::BBox;
pub use pathways::{CpaConfig, CpaParams, FusionResult, TokenGrid};
pub use synth::{GeneratorConfig, SceneSample, View};
