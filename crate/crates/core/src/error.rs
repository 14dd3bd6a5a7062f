use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, EivenError>;

#[derive(Debug, Error)]
pub enum EivenError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("rank error: expected a scalar loss, got shape {0:?}")]
    Rank(Vec<usize>),

    #[error("degenerate loss: no position is selected by the loss mask")]
    DegenerateLoss,

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("sequence length {length} exceeds context window {window} ({detail})")]
    Length {
        length: usize,
        window: usize,
        detail: String,
    },

    #[error("merge unsupported: {0}")]
    MergeUnsupported(String),

    #[error("pairing unavailable: attribute `{0}` has no other training instance")]
    PairingUnavailable(String),

    #[error("decode error: {0}")]
    Decode(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("non-finite loss at step {step} (lr = {lr})")]
    NonFiniteLoss { step: usize, lr: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("frozen tensor `{0}` cannot be updated")]
    Frozen(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl EivenError {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        EivenError::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        EivenError::Io {
            path: path.into(),
            source,
        }
    }
}
