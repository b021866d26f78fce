use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("duplicate instance id {0:?}")]
    DuplicateId(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("instance {id}: {msg}")]
    Instance { id: String, msg: String },

    #[error("instance too long: {0}")]
    TooLong(String),

    #[error("token id {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },

    #[error("empty response")]
    EmptyResponse,

    #[error("non-finite loss at step {step}")]
    NonFinite { step: usize },

    #[error("zero-spread gradients")]
    ZeroSpread,

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("record {id}: {msg}")]
    Record { id: String, msg: String },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
