use thiserror::Error;

/// Errors shared across the crate.
#[derive(Error, Debug)]
pub enum FstcnError {
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    Shape {
        context: String,
        expected: String,
        got: String,
    },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("out of bounds: {0}")]
    Bounds(String),

    #[error("gradient tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("bad file format: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, FstcnError>;

impl FstcnError {
    pub fn shape(context: impl Into<String>, expected: impl Into<String>, got: impl Into<String>) -> Self {
        FstcnError::Shape {
            context: context.into(),
            expected: expected.into(),
            got: got.into(),
        }
    }
}
