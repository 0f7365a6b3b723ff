//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("embedding dimension mismatch: file provides {found}, configuration expects {expected}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("document is empty after preprocessing")]
    EmptyDocument,

    #[error("corpus contains no documents")]
    EmptyCorpus,

    #[error("class {class} has {count} members, fewer than k = {k}")]
    ClassTooSmall { class: u8, count: usize, k: usize },

    #[error("training diverged at epoch {epoch}, batch {batch}: loss is not finite")]
    Divergence { epoch: usize, batch: usize },

    #[error("unknown architecture `{0}` (valid: bilstm, cnn, cnn-bilstm, bilstm-slmfcnn)")]
    UnknownArch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
