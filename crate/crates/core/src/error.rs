use thiserror::Error;

/// Every failure the library can report.
///
/// The CLI maps `Config` (and `Io`/`Parse`) to exit code 2 and `Numerical`,
/// `Domain` and `Assumption` to exit code 3.
#[derive(Debug, Error)]
pub enum DecompError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("assumption violated: {0}")]
    Assumption(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
}

impl From<csv::Error> for DecompError {
    fn from(e: csv::Error) -> Self {
        DecompError::Parse(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, DecompError>;

pub(crate) fn config<T>(msg: impl Into<String>) -> Result<T> {
    Err(DecompError::Config(msg.into()))
}
