use thiserror::Error;

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },
    #[error("batch-size error in {op}: need at least {min} samples, got {got}")]
    BatchSize {
        op: &'static str,
        min: usize,
        got: usize,
    },
    #[error("parameter error in {op}: {detail}")]
    Parameter { op: &'static str, detail: String },
    #[error("label error in {op}: {detail}")]
    Label { op: &'static str, detail: String },
    #[error("usage error: {0}")]
    Usage(String),
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
}

impl TensorError {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn param(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::Parameter {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn label(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::Label {
            op,
            detail: detail.into(),
        }
    }
}
