//! Training, evaluation, transfer harnesses, checkpoints and the CLI.

pub mod checkpoint;
pub mod cli;
pub mod evaluate;
pub mod prepare;
pub mod report;
pub mod run;
pub mod train;

pub use evaluate::{evaluate_windows, Constant, CopyLast, ModelPredictor, NodeMean, Predictor};
pub use prepare::{HostBatch, PreparedData, Purpose};
pub use run::{evaluate_run, few_shot_run, train_experiment, train_run, zero_shot, RunMetrics};
pub use train::{fit, EpochLog, SeedOutcome};
