//! Relation-aware multi-entity grounding over captioned scenes.
//!
//! The pipeline reads a caption and an image, infers how many entities the
//! caption refers to, extracts and aligns their token spans, reasons over
//! directed entity pairs, and regresses one bounding box per entity together
//! with the predicted relation set. Training runs in two stages: token-level
//! entity labeling first, then end-to-end box and relation supervision.

pub mod boxes;
pub mod config;
pub mod data;
pub mod error;
pub mod graph;
pub mod model;
pub mod nn;
pub mod spans;
pub mod tensor;

pub use config::{ModelConfig, RunConfig, TrainConfig};
pub use error::{Error, Result};
pub use tensor::Tensor;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
