use std::path::PathBuf;

use latefuse_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {msg}")]
    Data { path: PathBuf, msg: String },
    #[error("invalid class id {id} (max {max})")]
    InvalidClass { id: usize, max: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("dates not increasing: {0}")]
    Dates(String),
    #[error("no cloudless acquisitions for patch {0}")]
    NoCloudless(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing input: {0}")]
    Missing(String),
    #[error("non-finite loss {loss} at epoch {epoch}, step {step}")]
    NonFinite { loss: f64, epoch: usize, step: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn data(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Data {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
