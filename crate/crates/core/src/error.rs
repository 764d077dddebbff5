use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// The config document is malformed or uses an unknown/mistyped key.
    #[error("parse error at `{key}`: {message}")]
    Parse { key: String, message: String },

    /// The document parsed but violates a model invariant.
    #[error("validation error: {0}")]
    Validation(String),

    #[error("unknown preset `{name}` (valid presets: {valid})")]
    UnknownPreset { name: String, valid: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("range error: {0}")]
    Range(String),

    #[error("interaction pair {0}-{1} is not configured")]
    UnconfiguredPair(usize, usize),

    #[error("non-finite loss: {0}")]
    NonFiniteLoss(f64),

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("sweep grid is empty: {0}")]
    EmptyGrid(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("weight container: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn parse(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse { key: key.into(), message: message.into() }
    }

    /// True for failures of the filesystem or an output stream rather than of the input data.
    pub fn is_io(&self) -> bool {
        match self {
            Error::Io(_) => true,
            Error::Csv(e) => matches!(e.kind(), csv::ErrorKind::Io(_)),
            Error::Json(e) => e.is_io(),
            _ => false,
        }
    }
}
