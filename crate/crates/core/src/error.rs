use std::fmt;

/// Errors raised by tensor operations, the model, and the data pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("corrupt checkpoint at byte offset {offset}: {msg}")]
    Checkpoint { offset: u64, msg: String },

    #[error("{0}")]
    Config(ConfigError),

    #[error("image: {0}")]
    Image(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A config diagnostic pinned to a line and field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub field: String,
    pub msg: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(line) => write!(f, "config line {line}: {}: {}", self.field, self.msg),
            None => write!(f, "config: {}: {}", self.field, self.msg),
        }
    }
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(line: Option<usize>, field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config(ConfigError {
            line,
            field: field.into(),
            msg: msg.into(),
        })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
