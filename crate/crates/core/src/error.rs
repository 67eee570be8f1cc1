use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpearError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("degenerate gradient: {0}")]
    Degenerate(String),
    #[error("singular direction set: {0}")]
    Singular(String),
    #[error("insufficient candidates: pool spans {found} of {needed} dimensions")]
    InsufficientCandidates { found: usize, needed: usize },
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("tractability guard exceeded: {0}")]
    Intractable(String),
}

pub type Result<T> = std::result::Result<T, SpearError>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(SpearError::Shape(msg.into()))
}
