use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate depth: point lies on the camera plane (|d| = {0:e})")]
    DegenerateDepth(f64),
    #[error("singular transform (|det| = {0:e})")]
    SingularTransform(f64),
    #[error("degenerate ray: point coincides with the optical center")]
    DegenerateRay,
    #[error("domain error: {0}")]
    Domain(String),
    #[error("box center not visible in camera")]
    NotVisible,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("capacity exceeded: {0}")]
    Capacity(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("incompatible file: {0}")]
    Compat(String),
    #[error("malformed input: {0}")]
    Format(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
