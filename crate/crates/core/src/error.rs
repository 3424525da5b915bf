use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("point behind camera (z = {0} mm)")]
    BehindCamera(f64),
    #[error("no foreground pixels in depth band")]
    EmptyForeground,
    #[error("rank {attained} below requested {requested}")]
    RankDeficient { attained: usize, requested: usize },
    #[error("degenerate configuration: {0}")]
    Degenerate(String),
    #[error("object placement exhausted {0} tries")]
    RejectionBudget(usize),
    #[error("training diverged in {stage} at epoch {epoch}")]
    Diverged { stage: String, epoch: usize },
    #[error("missing artifact for stage {stage}: {path}")]
    MissingArtifact { stage: String, path: String },
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Tensor(#[from] fbpose_tensor::TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(CoreError::Invalid(msg.into()))
}
