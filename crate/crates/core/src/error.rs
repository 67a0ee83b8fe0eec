use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A numeric argument is outside its admissible range.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Shapes or structure of the inputs do not fit together.
    #[error("structural error: {0}")]
    Structural(String),

    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("length error in {path}: expected at least {expected} bytes, found {found}")]
    Length {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("numerical error at example {example}: {message}")]
    Numerical { example: usize, message: String },

    #[error("numerical failure: {0}")]
    Numerics(String),

    /// Persistent state (history, ledger) is inconsistent with the request.
    #[error("state error: {0}")]
    State(String),

    #[error("accounting error: {0}")]
    Accounting(String),

    /// Every configuration problem found, reported together.
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors caused by bad user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Parameter(_) | Error::Config(_) | Error::Structural(_) | Error::Format { .. }
        )
    }
}

pub(crate) fn param(msg: impl Into<String>) -> Error {
    Error::Parameter(msg.into())
}

pub(crate) fn structural(msg: impl Into<String>) -> Error {
    Error::Structural(msg.into())
}
