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

    #[error("format error: {0}")]
    Format(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation failed: {}", .0.join("; "))]
    Validation(Vec<String>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("missing labels for positions: {0}")]
    MissingLabels(String),

    #[error("optimizer received non-finite gradient at index {0}")]
    NonFiniteGradient(usize),

    #[error("no eligible positions for selector `{selector}` in record {record_id} at step {step}")]
    EmptySelection {
        selector: String,
        record_id: u64,
        step: usize,
    },

    #[error("denoiser failure: {0}")]
    Denoiser(String),

    #[error("protocol error in field `{field}`: {message}")]
    Protocol { field: String, message: String },

    #[error("protocol version mismatch: ours {ours}, theirs {theirs}")]
    Handshake { ours: String, theirs: String },

    #[error("infeasible world config: {0}")]
    InfeasibleConfig(String),

    #[error("missing upstream outputs: {}", .0.join(", "))]
    MissingOutputs(Vec<String>),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
