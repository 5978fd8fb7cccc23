use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: record rejected: {reason}")]
    InvalidRecord { line: usize, reason: String },

    #[error("invalid relations file: {0}")]
    Relations(String),

    #[error("invalid synthetic spec: {0}")]
    SyntheticSpec(String),

    #[error("partition: {0}")]
    Partition(String),

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("non-finite value in {stage}; parameter magnitudes: {diagnostics}")]
    NonFinite { stage: &'static str, diagnostics: String },

    #[error("target relation {target} out of range for {num_relations} relations")]
    TargetOutOfRange { target: usize, num_relations: usize },

    #[error("cannot build a representation for an empty sentence group")]
    EmptyGroup,

    #[error("protocol error on platform {platform}: {message}")]
    Protocol { platform: usize, message: String },

    #[error("evaluation: {0}")]
    Evaluation(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("message log line {line}: {message}")]
    Audit { line: usize, message: String },

    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Config(Vec<String>),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
