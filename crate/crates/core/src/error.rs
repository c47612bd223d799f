use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("line {line}: rating {value} outside 1..={n_values}")]
    Range {
        line: usize,
        value: i64,
        n_values: u8,
    },

    #[error("duplicate observation for (user {user}, item {item})")]
    Duplicate { user: usize, item: usize },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("estimation failed: {0}")]
    Estimation(String),

    #[error("generation failed: {0}")]
    Generation(String),

    #[error("evaluation failed: {0}")]
    Evaluation(String),

    #[error("oracle limit exceeded: {0}")]
    OracleLimit(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("model file line {line}: {msg}")]
    ModelFormat { line: usize, msg: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
}

/// Coarse failure classes, mapped onto process exit codes by the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Configuration,
    Io,
    Numerical,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Validation => 3,
            ErrorKind::Configuration => 4,
            ErrorKind::Io => 5,
            ErrorKind::Numerical => 6,
        }
    }
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Parse { .. }
            | Error::Range { .. }
            | Error::Duplicate { .. }
            | Error::Validation(_)
            | Error::ModelFormat { .. } => ErrorKind::Validation,
            Error::Config(_) | Error::Generation(_) | Error::OracleLimit(_) => {
                ErrorKind::Configuration
            }
            Error::Io { .. } => ErrorKind::Io,
            Error::Estimation(_) | Error::Evaluation(_) | Error::Numerical(_) => {
                ErrorKind::Numerical
            }
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}
