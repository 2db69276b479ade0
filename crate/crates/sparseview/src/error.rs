//! Crate-wide error type.
//!
//! Variants map onto the CLI exit-code contract: configuration and usage
//! problems, data/IO problems, and numeric failures are distinguishable by
//! callers without string matching.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration: bad flag value, inconsistent knobs.
    #[error("config: {0}")]
    Config(String),

    /// A caller broke an API precondition (shape mismatch, missing state).
    #[error("contract: {0}")]
    Contract(String),

    /// Input value outside the operation's domain (e.g. out-of-bounds pixel).
    #[error("domain: {0}")]
    Domain(String),

    /// Scene or file content is malformed or inconsistent.
    #[error("data: {0}")]
    Data(String),

    /// Filesystem failure with the offending path.
    #[error("io: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Non-finite values or other numeric breakdown; message names the site.
    #[error("numeric: {0}")]
    Numeric(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
