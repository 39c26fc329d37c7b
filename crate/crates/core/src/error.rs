use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, counts or file contents that do not fit together.
    #[error("configuration error: {0}")]
    Config(String),
    /// Non-finite values or a computation that left its stable range.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// An argument outside the support of a distribution or a feasible set.
    #[error("domain error: {0}")]
    Domain(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: u64, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

pub(crate) fn numeric(msg: impl Into<String>) -> Error {
    Error::Numeric(msg.into())
}

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}
