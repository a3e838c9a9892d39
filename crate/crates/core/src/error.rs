use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("overflow: {0}")]
    Overflow(String),

    #[error("moment does not exist: {0}")]
    Nonexistence(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("evaluation failed for subject {subject}: {reason}")]
    Evaluation { subject: String, reason: String },

    #[error("initialization failed: {0}")]
    Initialization(String),

    #[error("fit failed: {0}")]
    FitFailure(String),

    #[error("invalid model or data: {0}")]
    Validation(String),

    #[error("nested models violate ordering: {0}")]
    Nesting(String),

    #[error("fits were computed on different data: {0}")]
    MismatchedData(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn unsupported(msg: impl Into<String>) -> Self {
        Error::Unsupported(msg.into())
    }
}
