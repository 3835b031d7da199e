use thiserror::Error;

/// Error type shared by every module in the crate.
#[derive(Debug, Error)]
pub enum GdError {
    /// Tensor or layer widths do not conform.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A documented precondition was violated by the caller.
    #[error("contract error: {0}")]
    Contract(String),

    /// Index (domain, label, layer) out of range.
    #[error("index error: {0}")]
    Index(String),

    /// Batch too small to compute batch statistics.
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    /// Gaussian-process estimate requested over fewer than two domains.
    #[error("degenerate estimate: {0}")]
    DegenerateEstimate(String),

    /// NaN or Inf encountered where all values must be finite.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Invalid or inconsistent configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Checkpoint file malformed or incompatible with the model.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Retrieval protocol violated (e.g. query identity absent from gallery).
    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl GdError {
    pub fn contract(msg: impl Into<String>) -> Self {
        GdError::Contract(msg.into())
    }

    pub fn dimension(op: &'static str, detail: impl Into<String>) -> Self {
        GdError::Dimension {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, GdError>;
