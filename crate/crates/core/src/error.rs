use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("precondition violated in {op}: {message}")]
    Precondition { op: &'static str, message: String },

    #[error("invalid sentence {id}: {message}")]
    InvalidSentence { id: String, message: String },

    #[error("line {line}: schema error in field `{field}`: {message}")]
    Schema {
        line: usize,
        field: String,
        message: String,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("vocabulary error: {0}")]
    Vocab(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite gradient in parameter `{name}` ({count} entries)")]
    NonFinite { name: String, count: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("corpus too small: {message}")]
    Capacity { message: String, capacity: usize },

    #[error("backward already called on this graph; call reset_grads first")]
    BackwardTwice,

    #[error("{path}: {err}")]
    Io { path: PathBuf, err: std::io::Error },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn precondition(op: &'static str, message: impl Into<String>) -> Self {
        Error::Precondition {
            op,
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), err: source }
    }
}
