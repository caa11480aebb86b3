use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument `{arg}`: {reason}")]
    InvalidArgument { arg: &'static str, reason: String },

    #[error("index {index} out of range for grid of {len} patches")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("crop boxes reference different source images ({a:?} vs {b:?})")]
    SourceMismatch { a: (f64, f64), b: (f64, f64) },

    #[error("row {row} of {which} has zero norm")]
    ZeroNormRow { which: &'static str, row: usize },

    #[error("insufficient patches: need {needed}, grid has {available}")]
    InsufficientPatches { needed: usize, available: usize },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("corrupt data: {0}")]
    Corrupt(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(arg: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            arg,
            reason: reason.into(),
        }
    }
}
