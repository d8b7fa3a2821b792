use std::path::PathBuf;

use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parameter table: {0}")]
    Param(String),

    #[error("invalid phantom parameters: {0}")]
    Phantom(String),

    #[error("sample '{stem}': {reason}")]
    MissingPair { stem: String, reason: String },

    #[error("{}: {reason}", path.display())]
    Format { path: PathBuf, reason: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("non-finite value in {term} (epoch {epoch}, step {step})")]
    NonFinite { term: String, epoch: usize, step: usize },

    #[error("{0} is undefined for an empty mask")]
    UndefinedMetric(&'static str),

    #[error("expected {expected} layer outputs, got {got}")]
    LayerCount { expected: usize, got: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
