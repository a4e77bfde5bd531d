use thiserror::Error;
use wsl_tensor::TensorError;

#[derive(Debug, Error)]
pub enum WslError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("config error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("capability limit: {0}")]
    Capability(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, WslError>;

pub(crate) fn config<T>(msg: impl Into<String>) -> Result<T> {
    Err(WslError::Config(msg.into()))
}

pub(crate) fn contract<T>(msg: impl Into<String>) -> Result<T> {
    Err(WslError::Contract(msg.into()))
}
