use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, NliError>;

#[derive(Debug, Error)]
pub enum NliError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("axis {axis} out of range for tensor of rank {rank}")]
    Axis { axis: usize, rank: usize },

    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("{path}:{line}: {message}")]
    Format {
        path: String,
        line: usize,
        message: String,
    },

    #[error("{path}:{line}: missing required field `{field}`")]
    Schema {
        path: String,
        line: usize,
        field: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),

    #[error("misaligned records: {0}")]
    Misaligned(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl NliError {
    pub fn contract(msg: impl Into<String>) -> Self {
        NliError::Contract(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        NliError::Io {
            path: path.into(),
            source,
        }
    }
}
