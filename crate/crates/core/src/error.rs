use std::fmt;

/// Crate-wide error type.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Shape or dimension mismatch between operands.
    Dim(String),
    /// Invalid hyperparameter or configuration value.
    Param(String),
    /// A value fell outside its documented range.
    Range(String),
    /// Bad input data (empty set, malformed request, ...).
    Input(String),
    /// File could not be parsed; names the file and the offending row.
    Parse {
        path: String,
        row: usize,
        msg: String,
    },
    /// I/O failure wrapped with the path involved.
    Io(String),
    /// Training aborted (NaN loss/gradients and the like).
    Train(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dim(m) => write!(f, "dimension error: {m}"),
            Error::Param(m) => write!(f, "parameter error: {m}"),
            Error::Range(m) => write!(f, "range error: {m}"),
            Error::Input(m) => write!(f, "input error: {m}"),
            Error::Parse { path, row, msg } => {
                write!(f, "parse error in {path} at row {row}: {msg}")
            }
            Error::Io(m) => write!(f, "io error: {m}"),
            Error::Train(m) => write!(f, "training error: {m}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
