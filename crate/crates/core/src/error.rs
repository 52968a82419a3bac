use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("record {index}: {message}")]
    Parse { index: usize, message: String },

    #[error("duplicate center qid {0}")]
    DuplicateCenter(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("sequence too long: required {required} positions, context holds {actual}")]
    ContextOverflow { required: usize, actual: usize },

    #[error("width mismatch: expected {expected}, got {actual}")]
    WidthMismatch { expected: usize, actual: usize },

    #[error("empty neighborhood for {0}")]
    EmptyNeighborhood(String),

    #[error("label {0:?} tokenizes to no ids")]
    EmptyLabel(String),

    #[error("non-finite loss: {0}")]
    Divergence(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error("fingerprint mismatch for {what}: expected {expected}, found {found}")]
    Fingerprint {
        what: String,
        expected: String,
        found: String,
    },

    #[error("integrity failure for {qid}: {message}")]
    Integrity { qid: String, message: String },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
