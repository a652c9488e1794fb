//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by dataset generation, model plumbing, and IO.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error on {path}: {source}")]
    Image {
        path: String,
        #[source]
        source: image::ImageError,
    },

    #[error("unknown label name: {0:?}")]
    UnknownLabel(String),

    #[error("unknown sample id: {0:?}")]
    UnknownId(String),

    #[error("failed to load sample {id:?}: {message}")]
    Sample { id: String, message: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("archive format error: {0}")]
    Format(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("training diverged: {0}")]
    NonFiniteLoss(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn image(path: impl AsRef<std::path::Path>, source: image::ImageError) -> Self {
        Error::Image {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
