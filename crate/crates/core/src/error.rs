use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An input violated a mathematical precondition (non-finite state,
    /// mismatched dimensions, empty dataset, ...).
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    /// A binary or text file did not match its declared layout.
    #[error("format error in section `{section}`: {detail}")]
    Format { section: String, detail: String },

    #[error("{path}:{line}: malformed annotation record: {detail}")]
    MalformedRecord {
        path: PathBuf,
        line: usize,
        detail: String,
    },

    #[error("oracle unavailable: demonstration carries no ground-truth states (human rating required)")]
    OracleUnavailable,

    #[error("invalid rating {0}: ratings range from 1 to 5")]
    InvalidRating(i64),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("missing run files in {dir}: {missing:?}")]
    MissingRunFiles { dir: PathBuf, missing: Vec<String> },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn format(section: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            section: section.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
