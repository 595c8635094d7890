use std::path::{Path, PathBuf};

use smalldet_core::metrics::MetricsError;
use smalldet_core::{BoxError, TensorError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{}: {cause}", path.display())]
    Io { path: PathBuf, cause: std::io::Error },
    #[error("{}: invalid JSON: {cause}", path.display())]
    Json {
        path: PathBuf,
        cause: serde_json::Error,
    },
    #[error("{}: {detail}", path.display())]
    Format { path: PathBuf, detail: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("object size {size} does not fit in a {image}×{image} image")]
    Unplaceable { size: usize, image: usize },
    #[error("checkpoint does not match the model: {0}")]
    Mismatch(String),
    #[error("loss became non-finite at epoch {epoch}, batch {batch}; first non-finite value produced by op `{op}`")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        op: String,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Box(#[from] BoxError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl HarnessError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.to_path_buf(),
            cause: source,
        }
    }

    pub fn format(path: &Path, detail: impl Into<String>) -> Self {
        HarnessError::Format {
            path: path.to_path_buf(),
            detail: detail.into(),
        }
    }
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;
