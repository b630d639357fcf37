use thiserror::Error;

/// Crate-wide error type.
///
/// Variants map onto the CLI exit codes: `Value` and `Constraint` are
/// configuration errors (exit 2), `Io`, `Format`, and `Dimension` are
/// data errors (exit 3), `Numeric` is a numeric failure (exit 4).
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("format error: {0}")]
    Format(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid value: {0}")]
    Value(String),

    #[error("constraint violated: {0}")]
    Constraint(String),

    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl Error {
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub fn dimension(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn value(msg: impl Into<String>) -> Self {
        Error::Value(msg.into())
    }

    pub fn constraint(msg: impl Into<String>) -> Self {
        Error::Constraint(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    /// Process exit code for the CLI: 2 config, 3 data/format, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Value(_) | Error::Constraint(_) => 2,
            Error::Io(_) | Error::Format(_) | Error::Dimension(_) => 3,
            Error::Numeric(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
