use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failure categories for the binary containers.
#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("truncated payload: needed {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },
    #[error("dimension overflow: {0}")]
    DimensionOverflow(String),
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("trailing bytes after payload: {0}")]
    TrailingBytes(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("scene: {0}")]
    Scene(String),
    #[error("raster: {0}")]
    Raster(String),
    #[error("hierarchy: {0}")]
    Hierarchy(String),
    #[error("embed: {0}")]
    Embed(String),
    #[error("losses: {0}")]
    Loss(String),
    #[error("train: non-finite {term} at iteration {iteration}")]
    NonFinite { iteration: usize, term: &'static str },
    #[error("train: {0}")]
    Train(String),
    #[error("query: {0}")]
    Query(String),
    #[error("metrics: {0}")]
    Metrics(String),
    #[error("config: {0}")]
    Config(String),
    #[error("io: {path}: {source}")]
    Container {
        path: PathBuf,
        #[source]
        source: ContainerError,
    },
    #[error("io: {path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("io: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Process exit code for this failure: 1 usage, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::NonFinite { .. } => 3,
            _ => 2,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
