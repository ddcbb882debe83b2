use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] io::Error),

    #[error("format error at line {line}: {message}")]
    Format { line: usize, message: String },

    #[error("duplicate passage id `{0}`")]
    DuplicateId(String),

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("passage `{0}` not found")]
    NotFound(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no positives in contrastive batch")]
    NoPositives,

    #[error("retrieval returned no evidence for the question")]
    NoEvidence,

    #[error("could not parse candidates from reply {reply:?}")]
    CandidateParse { reply: String },

    #[error("backend error: {0}")]
    Backend(String),

    #[error("transport error: {0}")]
    Transport(String),

    #[error("corrupt index file: {0}")]
    CorruptIndex(String),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(message: impl Into<String>) -> Self {
        Error::InvalidArgument(message.into())
    }
}
