use alloc::string::String;

/// Crate-wide error type.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("tape already consumed by a backward pass")]
    StaleTape,
    #[error("duplicate parameter name {0}")]
    DuplicateParam(String),
    #[error("unknown parameter {0}")]
    UnknownParam(String),
    #[error("parameter {name}: expected shape {expected}, got {got}")]
    ParamShapeMismatch {
        name: String,
        expected: String,
        got: String,
    },
    #[error("unknown item id {0}")]
    UnknownItem(usize),
    #[error("session already terminated")]
    SessionTerminated,
    #[error("unknown variant {0:?} (expected full, wo-hie, wo-tc, wo-fm or random)")]
    UnknownVariant(String),
    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn shape_err(context: &'static str, expected: impl core::fmt::Debug, got: impl core::fmt::Debug) -> Error {
    Error::ShapeMismatch {
        context,
        expected: alloc::format!("{expected:?}"),
        got: alloc::format!("{got:?}"),
    }
}
