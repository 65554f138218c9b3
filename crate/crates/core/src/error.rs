use std::path::PathBuf;

use thiserror::Error;

use crate::train::archive::ArchiveError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at `{path}`: {message}")]
    Parse { path: String, message: String },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("config error for key `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("lookup error: {0}")]
    Lookup(String),
    #[error("input too short: {frames} frames, need at least {min}")]
    InputTooShort { frames: usize, min: usize },
    #[error("cannot normalize a zero vector")]
    ZeroVector,
    #[error("sampler diverged at step {step}: non-finite state")]
    Divergence { step: usize },
    #[error("non-finite `{term}` loss at step {step}")]
    NonFiniteLoss { step: usize, term: String },
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image encoding failed: {0}")]
    Image(String),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether this error is a usage/contract problem (as opposed to I/O).
    pub fn is_usage(&self) -> bool {
        !matches!(self, Error::Io { .. } | Error::Image(_))
            && !matches!(self, Error::Archive(ArchiveError::Io { .. }))
    }
}
