use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numeric failure: {0}")]
    NumericFailure(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("malformed {format} data: {reason}")]
    Format { format: &'static str, reason: String },

    #[error("slice {index}: {source}")]
    AtSlice { index: usize, source: Box<Error> },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
