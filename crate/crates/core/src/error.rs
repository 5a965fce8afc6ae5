use alloc::string::String;

/// Errors raised by the simulation primitives.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("sample is in the {actual} domain, expected {expected}")]
    WrongDomain {
        expected: &'static str,
        actual: &'static str,
    },

    #[error("dataset split is empty")]
    EmptyDataset,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("payload does not match template: {0}")]
    TemplateMismatch(String),

    #[error("corrupted payload: {0}")]
    CorruptPayload(String),

    #[error("undefined input: {0}")]
    UndefinedInput(String),

    #[error("cannot schedule {requested} of {available} UEs")]
    Schedule { requested: usize, available: usize },
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn shape_err(expected: &[usize], actual: &[usize]) -> Error {
    Error::ShapeMismatch {
        expected: alloc::format!("{expected:?}"),
        actual: alloc::format!("{actual:?}"),
    }
}
