use std::path::PathBuf;

/// Errors produced by the enhancement pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("size error: {0}")]
    Size(String),
    #[error("range error: {0}")]
    Range(String),
    #[error("rank error: {0}")]
    Rank(String),
    #[error("validation error in row {row}: {message}")]
    Validation { row: String, message: String },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
