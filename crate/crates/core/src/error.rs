use std::path::PathBuf;

use edt_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EdtError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("argument error: {0}")]
    Argument(String),

    #[error("checkpoint manifest error: {0}")]
    Manifest(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
}

impl EdtError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        EdtError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        EdtError::Json {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = EdtError> = std::result::Result<T, E>;
