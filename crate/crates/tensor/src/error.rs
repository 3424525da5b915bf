use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch: {op} got {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid layer configuration: {0}")]
    InvalidSpec(String),
    #[error("non-finite gradient at layer {layer}")]
    NonFiniteGradient { layer: usize },
    #[error("non-finite activation at layer {layer}")]
    NonFiniteActivation { layer: usize },
    #[error("malformed weights file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
