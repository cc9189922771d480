use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = UdvdError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum UdvdError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("frame sequence {dir}: {reason}")]
    Frames { dir: PathBuf, reason: String },

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl UdvdError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        UdvdError::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        UdvdError::InvalidArgument(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        UdvdError::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        UdvdError::Io {
            path: path.into(),
            source,
        }
    }
}
