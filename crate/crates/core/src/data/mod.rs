//! Datasets, splits, windows, missing patterns and metrics.

pub mod cluster;
pub mod dataset;
pub mod masks;
pub mod metrics;
pub mod synthetic;
pub mod windows;

pub use dataset::{load_pems, split_6_2_2, NormalizationStats, SpatialTemporalDataset, Split};
pub use masks::{condition_missing, generate_cm, generate_rm, CmMask, MaskMeta};
pub use metrics::{metrics, MetricAccumulator, Metrics};
pub use windows::{make_windows, WindowSpec};
