use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),

    #[error("degenerate box: {0}")]
    DegenerateBox(String),

    #[error("invalid sensor spec: {0}")]
    InvalidSensor(String),

    #[error("invalid channel table: {0}")]
    InvalidChannelTable(String),

    #[error("channel matching failed: {0}")]
    ChannelMatch(String),

    #[error("index out of range: {0}")]
    OutOfRange(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{path}: {source}")]
    InFile { path: String, source: Box<Error> },
}

impl Error {
    pub fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }

    /// Attaches the file the error came from.
    pub fn in_file(self, path: impl AsRef<std::path::Path>) -> Self {
        Error::InFile {
            path: path.as_ref().display().to_string(),
            source: Box::new(self),
        }
    }

    /// The error without file context.
    pub fn root(&self) -> &Error {
        match self {
            Error::InFile { source, .. } => source.root(),
            e => e,
        }
    }
}
