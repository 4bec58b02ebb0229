//! Error type shared by every module in the crate.

use thiserror::Error;

/// Errors produced by kernels, the gradient engine, and the harness.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand dimensions do not line up.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Input violates a precondition (empty feature set, bad config value, ...).
    #[error("invalid input for {op}: {detail}")]
    Input { op: &'static str, detail: String },

    /// A guarded operation was asked to materialize something too large.
    #[error("capacity guard tripped in {op}: {detail}")]
    Capacity { op: &'static str, detail: String },

    /// A tensor contains NaN or infinite entries.
    #[error("non-finite value in tensor `{tensor}`")]
    NonFinite { tensor: String },

    /// The operation is not defined for the requested mode.
    #[error("unsupported mode for {op}: {detail}")]
    Unsupported { op: &'static str, detail: String },

    /// Malformed serialized data (config, checkpoint, report).
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn input(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Input {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
