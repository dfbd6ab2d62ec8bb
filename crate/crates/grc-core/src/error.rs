//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GrcError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("block pool exhausted: need {needed} blocks, {available} free")]
    PoolExhausted { needed: usize, available: usize },
    #[error("model fingerprint mismatch: record has {record:#018x}, model has {model:#018x}")]
    FingerprintMismatch { record: u64, model: u64 },
    #[error("unknown doc id: {0:?}")]
    UnknownDoc(String),
    #[error("training diverged at step {step}: loss is not finite")]
    Divergence { step: usize },
    #[error("degenerate embedding: pooled vector has zero norm")]
    ZeroNormEmbedding,
    #[error("context overflow: {0}")]
    ContextOverflow(String),
    #[error("malformed record: {0}")]
    MalformedRecord(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, GrcError>;
