use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A numeric argument is outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("empty input: {0}")]
    Empty(String),

    /// Malformed definition file; `location` is a line number or a JSON path.
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("tokenizer cannot represent input: {0}")]
    Coverage(String),

    #[error("invalid architecture descriptor: {0}")]
    Descriptor(String),

    #[error("probability model error: {0}")]
    Model(String),

    #[error("invalid coder input: {0}")]
    Input(String),

    #[error("decode error: {0}")]
    Decode(String),

    #[error("invalid container: {0}")]
    Container(String),

    #[error("ingest error for {path}: {message}")]
    Ingest { path: PathBuf, message: String },

    #[error("pipeline error: {0}")]
    Pipeline(String),

    /// Records and samples disagree; never recovered silently.
    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            location: location.into(),
            message: message.into(),
        }
    }

    pub(crate) fn ingest(path: impl Into<PathBuf>, message: impl std::fmt::Display) -> Self {
        Error::Ingest {
            path: path.into(),
            message: message.to_string(),
        }
    }

    /// True for errors that indicate corrupted or mismatched data rather than bad input.
    pub fn is_integrity(&self) -> bool {
        matches!(self, Error::Integrity(_) | Error::Decode(_))
    }
}
