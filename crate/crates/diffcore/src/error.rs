use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: division by zero")]
    DivisionByZero { op: &'static str },
    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("optimizer has no state slot for parameter {0}")]
    MissingState(usize),
}

pub type Result<T> = std::result::Result<T, DiffError>;

pub(crate) fn invalid(op: &'static str, reason: impl Into<String>) -> DiffError {
    DiffError::InvalidArgument {
        op,
        reason: reason.into(),
    }
}
