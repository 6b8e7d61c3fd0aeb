use clipseg_core::CoreError;
use clipseg_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{what} line {line}: {msg}")]
    Parse { what: &'static str, line: usize, msg: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid sequence spec: {0}")]
    Spec(String),
    #[error("evaluation error: {0}")]
    Eval(String),
    #[error("non-finite loss at iteration {iteration}; diagnostics written to {dump}")]
    NonFinite { iteration: usize, dump: String },
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

pub(crate) fn parse_err(what: &'static str, line: usize, msg: impl Into<String>) -> HarnessError {
    HarnessError::Parse {
        what,
        line,
        msg: msg.into(),
    }
}
