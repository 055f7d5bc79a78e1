//! Error types shared across the lab.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),
    /// Raised when a training objective produces NaN/inf. The optimizer step
    /// is not applied; the harness records the run as collapsed.
    #[error("non-finite loss at step {step}: {value}")]
    NonFiniteLoss { step: u64, value: f64 },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid<T>(msg: impl Into<String>) -> Result<T> {
        Err(Error::InvalidArgument(msg.into()))
    }

    pub fn shape<T>(msg: impl Into<String>) -> Result<T> {
        Err(Error::ShapeMismatch(msg.into()))
    }
}
