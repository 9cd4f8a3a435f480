use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    /// A configuration value is out of range or inconsistent.
    #[error("invalid config at `{field}`: {reason}")]
    Config { field: String, reason: String },

    /// An operation was called outside its preconditions.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("objective {objective} does not support {mode} retrieval")]
    UnsupportedRetrievalMode { objective: String, mode: String },

    #[error("non-finite loss at step {step} (last good step: {last_good:?})")]
    NonFiniteLoss {
        step: usize,
        last_good: Option<usize>,
    },

    #[error("artifact mismatch: {0}")]
    ArtifactMismatch(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code: 2 validation, 3 numerical, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. }
            | Error::Contract(_)
            | Error::UnsupportedRetrievalMode { .. }
            | Error::ArtifactMismatch(_)
            | Error::Json(_) => 2,
            Error::Tensor(TensorError::Degenerate { .. } | TensorError::Domain { .. })
            | Error::NonFiniteLoss { .. } => 3,
            Error::Tensor(_) => 2,
            Error::Io { .. } | Error::Csv(_) => 4,
        }
    }
}
