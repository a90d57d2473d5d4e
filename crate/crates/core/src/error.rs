use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// A scalar argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Mismatched lengths or matrix dimensions.
    #[error("shape error: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    /// A programmed weight voltage exceeds the normalized range.
    #[error("range error: weight {index} = {value} lies outside [-1, 1]")]
    Range { index: usize, value: f64 },

    #[error("numeric error: {0}")]
    Numeric(String),

    /// Training produced a non-finite loss.
    #[error("divergence at epoch {epoch}: {detail}")]
    Divergence { epoch: usize, detail: String },

    /// Caller supplied inconsistent or missing inputs.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },

    /// Reading or writing an artifact failed. Holds the path and the OS message.
    #[error("io error on {path}: {detail}")]
    Io { path: String, detail: String },
}

impl Error {
    pub(crate) fn shape(expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn io(path: &std::path::Path, err: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            detail: err.to_string(),
        }
    }

    /// Process exit status: 2 for configuration and usage problems, 3 for
    /// divergence, 1 for anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Divergence { .. } => 3,
            Error::Domain(_)
            | Error::Shape { .. }
            | Error::Range { .. }
            | Error::Usage(_)
            | Error::Parse { .. } => 2,
            Error::Numeric(_) | Error::Io { .. } => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
