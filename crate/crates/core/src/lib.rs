//! Spatial-temporal forecasting and imputation with a transformer backbone.
//!
//! Node windows are turned into tokens (one per node, plus two system-level
//! temporal tokens), compressed to a few region tokens by sandglass attention,
//! passed through a partially fine-tuned GPT-2-class stack and projected back
//! to per-node outputs.

pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod losses;
pub mod model;
pub mod nn;
pub mod ops;
pub mod runtime;
pub mod sga;
pub mod spectral;
pub mod tokenizer;

pub use config::{ExperimentConfig, ModelConfig, Task};
pub use error::{Error, Result};
pub use model::{Batch, ForwardOutput, StdPlm};
pub use spectral::SensorGraph;
