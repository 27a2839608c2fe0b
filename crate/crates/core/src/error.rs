use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the library can report.
///
/// [`Error::exit_code`] maps each variant onto the process exit codes used by
/// the command-line front end.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch on {axis}: expected {expected}, got {actual}")]
    Dimension {
        op: &'static str,
        axis: String,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("model build failed at {layer}: {reason}")]
    Build { layer: String, reason: String },
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
    #[error("data error: {0}")]
    Data(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("numeric abort: {0}")]
    NumericAbort(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    /// 2 for configuration problems, 3 for data and I/O, 4 for numeric aborts.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Build { .. } => 2,
            Error::NumericAbort(_) | Error::NonFinite { .. } => 4,
            _ => 3,
        }
    }
}
