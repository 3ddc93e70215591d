//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

/// Errors produced by the retrieval pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// Bad input: malformed config, invariant violation, shape mismatch.
    #[error("validation error: {0}")]
    Validation(String),
    /// An index or epoch outside its declared range.
    #[error("range error: {0}")]
    Range(String),
    /// A referenced entity (domain spec, record) does not exist.
    #[error("lookup error: {0}")]
    Lookup(String),
    /// A stored artifact (checkpoint, sidecar) failed to decode.
    #[error("corrupt artifact: {0}")]
    Corrupt(String),
    /// The denoiser backend refused or failed a request.
    #[error("backend failure: {0}")]
    Backend(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn range(msg: impl Into<String>) -> Self {
        Error::Range(msg.into())
    }

    pub fn lookup(msg: impl Into<String>) -> Self {
        Error::Lookup(msg.into())
    }

    pub fn corrupt(msg: impl Into<String>) -> Self {
        Error::Corrupt(msg.into())
    }

    pub fn backend(msg: impl Into<String>) -> Self {
        Error::Backend(msg.into())
    }
}
