use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// An architecture or run configuration that cannot be realized.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed input tensor or image.
    #[error("input error: {0}")]
    Input(String),

    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("enhancement failed: {0}")]
    Enhancement(String),

    #[error("join error, unmatched keys: {0:?}")]
    Join(Vec<String>),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// The brute-force evaluator refuses instances it cannot enumerate.
    #[error("instance too large for exhaustive evaluation: {0}")]
    TooLarge(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }
}
