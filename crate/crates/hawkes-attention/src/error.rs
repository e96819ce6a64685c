//! Crate-wide error type with CLI exit-code categories.

use thiserror::Error;

/// Unified error type for the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("parse error ({context}): {message}")]
    Parse { context: String, message: String },

    #[error("sequence {index}: timestamps must be non-decreasing")]
    NonMonotone { index: usize },

    #[error("sequence {index}: event type {found} out of range (num_types = {num_types})")]
    TypeOutOfRange {
        index: usize,
        found: usize,
        num_types: usize,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite loss (sequence index {index})")]
    NonFiniteLoss { index: usize },

    #[error("training diverged at epoch {epoch}; last good checkpoint retained")]
    Diverged { epoch: usize },

    #[error("thinning exceeded {max} rejections; increase bound_factor")]
    RejectionLimit { max: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    /// Exit-code category for the CLI: 2 config, 3 data, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parse { .. } => 2,
            Error::NonMonotone { .. } | Error::TypeOutOfRange { .. } | Error::Io(_) | Error::Json(_) | Error::Checkpoint(_) => 3,
            Error::NonFiniteLoss { .. } | Error::Diverged { .. } | Error::RejectionLimit { .. } => 4,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
