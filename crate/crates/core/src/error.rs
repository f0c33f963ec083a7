use thiserror::Error;

pub type Result<T, E = CoreError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("tensor format error at byte {offset}: {reason}")]
    Format { offset: usize, reason: String },

    #[error("coarse match set is not exclusive: {side} index {index} appears twice")]
    DuplicateMatch { side: &'static str, index: usize },

    #[error("invalid value: {0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
