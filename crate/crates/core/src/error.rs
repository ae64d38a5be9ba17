//! Crate-wide error type. Variants map onto the CLI exit codes:
//! validation/format/config -> 1, I/O -> 2, numeric -> 3.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("format error in {path}{}: {msg}", context_suffix(*line))]
    Format { path: String, line: Option<usize>, msg: String },

    #[error("validation error{}: {rule}", record_suffix(*record))]
    Validation { record: Option<usize>, rule: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("numeric failure: {0}")]
    Numeric(String),
}

fn context_suffix(line: Option<usize>) -> String {
    match line {
        Some(l) => format!(" (line {l})"),
        None => String::new(),
    }
}

fn record_suffix(record: Option<usize>) -> String {
    match record {
        Some(r) => format!(" in record {r}"),
        None => String::new(),
    }
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<String>, line: Option<usize>, msg: impl Into<String>) -> Self {
        Error::Format { path: path.into(), line, msg: msg.into() }
    }

    pub fn validation(record: Option<usize>, rule: impl Into<String>) -> Self {
        Error::Validation { record, rule: rule.into() }
    }

    /// Stable process exit code for each error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation { .. } | Error::Format { .. } | Error::Config(_) => 1,
            Error::Io { .. } => 2,
            Error::Numeric(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
