use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input shape mismatch: expected {expected}, got {got}")]
    InputShape { expected: usize, got: usize },

    #[error("non-finite value in layer {layer}")]
    NonFinite { layer: usize },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("invalid network spec: {0}")]
    InvalidSpec(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Validation(Vec<String>),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("search protocol error: {0}")]
    Protocol(String),

    #[error("estimator error: {0}")]
    Estimator(String),

    #[error("replay buffer is empty")]
    EmptyBuffer,

    #[error("non-finite loss at training step {step}")]
    NonFiniteLoss { step: u64 },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Errors a caller may retry after more data arrives.
    pub fn is_retryable(&self) -> bool {
        matches!(self, Error::EmptyBuffer)
    }
}
