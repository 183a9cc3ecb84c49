//! Error type shared by every module.

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum SnError {
    /// Tensor dimensions are invalid or inconsistent with an operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// A numeric argument is outside its documented domain.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// A layer or statistics configuration is invalid (group counts etc.).
    #[error("configuration error: {0}")]
    Config(String),

    /// An operation was invoked with incompatible state, e.g. a backward
    /// pass fed a cache from different parameters or from eval mode.
    #[error("state error: {0}")]
    State(String),

    /// Input data is unusable (empty loader, bad labels, ...).
    #[error("data error: {0}")]
    Data(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}: {reason}")]
    Divergence { step: usize, reason: String },

    /// A stored artifact could not be decoded.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SnError>;
