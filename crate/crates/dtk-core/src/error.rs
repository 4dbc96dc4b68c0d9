//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DtkError {
    /// Tensor shapes incompatible with an operation.
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Non-finite values or invalid numeric domain (log of non-positive, zero norm, ...).
    #[error("numeric error in {op}: {detail}")]
    Numeric { op: &'static str, detail: String },

    /// A caller violated an API contract (non-scalar loss, label out of range, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Malformed checkpoint or serialized artifact.
    #[error("format error: {0}")]
    Format(String),

    /// Bad line in a JSONL dataset file.
    #[error("ingestion error at line {line}: {detail}")]
    Ingest { line: usize, detail: String },

    /// Invalid synthetic-data or training configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Subset request cannot be satisfied (e.g. too few samples per class).
    #[error("subset error: {0}")]
    Subset(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DtkError>;

impl DtkError {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        DtkError::Shape { op, detail: detail.into() }
    }

    pub fn numeric(op: &'static str, detail: impl Into<String>) -> Self {
        DtkError::Numeric { op, detail: detail.into() }
    }
}
