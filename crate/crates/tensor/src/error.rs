use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("config error in {op}: {detail}")]
    Config { op: &'static str, detail: String },
    #[error("contract violation: {0}")]
    Contract(String),
}

impl TensorError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::Shape { op, detail: detail.into() }
    }

    pub(crate) fn config(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::Config { op, detail: detail.into() }
    }
}

pub type Result<T> = std::result::Result<T, TensorError>;
