use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: line {line}: {message}")]
    Record {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("duplicate id `{0}`")]
    DuplicateId(String),

    #[error("snapshot: {0}")]
    Snapshot(String),

    #[error("missing value for template placeholder `{0}`")]
    Placeholder(String),

    #[error("template: {0}")]
    Template(String),

    #[error("mock script: {0}")]
    MockScript(String),

    #[error("no scripted response matches prompt (prompt hash {0})")]
    Unscripted(String),

    #[error("request {request_id} failed after {attempts} attempts: {message}")]
    RetriesExhausted {
        request_id: String,
        attempts: u32,
        message: String,
    },

    #[error("malformed backend payload: missing field `{0}`")]
    MissingField(String),

    #[error("backend: {0}")]
    Backend(String),

    #[error("logprobs missing")]
    LogprobsMissing,

    #[error("intrinsic scoring unavailable")]
    IntrinsicUnavailable,

    #[error("scorer transport error: {0}")]
    Scorer(String),

    #[error("reranker transport error: {0}")]
    Reranker(String),

    #[error("round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn record(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Record {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}
