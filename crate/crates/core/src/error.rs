use std::path::PathBuf;

use stan_tensor::TensorError;
use thiserror::Error;

/// Broad failure class, mapped to process exit codes by the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numerical,
    Io,
}

#[derive(Debug, Error)]
pub enum StanError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },

    #[error("checkpoint does not match configuration: {0}")]
    CheckpointMismatch(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl StanError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl std::fmt::Display, reason: impl Into<String>) -> Self {
        Self::Format {
            path: path.to_string(),
            reason: reason.into(),
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Self::Config(_) | Self::CheckpointMismatch(_) => ErrorKind::Config,
            Self::Data(_) | Self::Format { .. } => ErrorKind::Data,
            Self::Numerical(_) => ErrorKind::Numerical,
            Self::Tensor(TensorError::NonFinite(_)) => ErrorKind::Numerical,
            Self::Tensor(_) => ErrorKind::Data,
            Self::Io { .. } => ErrorKind::Io,
        }
    }
}

pub type Result<T, E = StanError> = std::result::Result<T, E>;
