use thiserror::Error;

/// Errors surfaced by the library.
///
/// The variants line up with the CLI exit codes: configuration problems,
/// data problems, and numeric failures are reported differently.
#[derive(Debug, Error)]
pub enum CtpError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CtpError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        CtpError::InvalidInput(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        CtpError::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        CtpError::Data(msg.into())
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        CtpError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, CtpError>;
