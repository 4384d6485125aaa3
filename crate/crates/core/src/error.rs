use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or dimensions that cannot be combined.
    #[error("shape error: {0}")]
    Structural(String),

    /// Inputs that have the right shape but invalid content.
    #[error("validation error: {0}")]
    Validation(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data format error: {0}")]
    Format(String),

    /// Pretrained checkpoint names that do not line up with the weight-name table.
    #[error("weight mapping error: missing {missing:?}, unmatched {unmatched:?}")]
    Mapping {
        missing: Vec<String>,
        unmatched: Vec<String>,
    },

    /// The model was built for a graph with a different node count.
    #[error("graph has {got} nodes but the cached spectral basis was built for {expected}; rebuild the basis first")]
    RebuildRequired { expected: usize, got: usize },

    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("run directory {0} is locked by another process")]
    Locked(PathBuf),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}

macro_rules! structural {
    ($($arg:tt)*) => { $crate::error::Error::Structural(format!($($arg)*)) };
}

macro_rules! invalid {
    ($($arg:tt)*) => { $crate::error::Error::Validation(format!($($arg)*)) };
}

pub(crate) use invalid;
pub(crate) use structural;
