use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed JSON in {path} at line {line}, column {column}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("unknown video id `{0}`")]
    UnknownVideo(String),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("bias type mismatch: {left} vs {right}")]
    BiasTypeMismatch { left: String, right: String },

    #[error("non-finite {what} at component {index}")]
    NonFinite { what: &'static str, index: usize },

    #[error("video `{0}` carries no latent features")]
    MissingFeatures(String),

    #[error("training diverged at epoch {epoch}, iteration {iter}: {what} = {value}")]
    Divergence {
        epoch: usize,
        iter: usize,
        what: String,
        value: f64,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
