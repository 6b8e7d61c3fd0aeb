use clipseg_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("deformable attention needs at least one sample per head")]
    EmptySamples,
    #[error("frame count mismatch: schedule has {schedule} frames, clip has {clip}")]
    FrameMismatch { schedule: usize, clip: usize },
    #[error("cost matrix entry ({0}, {1}) is NaN")]
    NanCost(usize, usize),
    #[error("assignment error: {0}")]
    Assignment(String),
    #[error("stitching error: {0}")]
    Stitch(String),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("malformed {what}: {msg}")]
    Format { what: &'static str, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;

pub(crate) fn shape_err(msg: impl Into<String>) -> CoreError {
    CoreError::Shape(msg.into())
}

impl From<CoreError> for TensorError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Tensor(t) => t,
            other => TensorError::Invalid {
                op: "model",
                msg: other.to_string(),
            },
        }
    }
}
