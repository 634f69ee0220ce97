use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,

    #[error("token id exceeds vocabulary: {id} >= {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },

    #[error("empty prefix")]
    EmptyPrefix,

    #[error("gold span out of valid region: type {type_id}, ({start}, {end})")]
    GoldSpanOutOfRegion { type_id: usize, start: usize, end: usize },

    #[error("text too long for instruction window")]
    TextTooLong,

    #[error("invalid config: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown label {0:?}")]
    UnknownLabel(String),

    #[error("label word {0:?} is not in the vocabulary")]
    LabelWordOutOfVocabulary(String),

    #[error("unregistered task_type {given:?}; registered types: {registered}")]
    UnregisteredTask { given: String, registered: String },

    #[error("{path}:{line}: malformed record: {message}")]
    Malformed { path: PathBuf, line: usize, message: String },

    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
