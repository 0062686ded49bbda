//! Error types shared across the crate.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes are incompatible with the requested operation.
    #[error("shape error in {op}: {msg}")]
    Shape { op: &'static str, msg: String },

    /// A non-finite value was produced or consumed where finiteness is required.
    #[error("numerics error in {op}: {msg}")]
    Numerics { op: String, msg: String },

    /// Invalid configuration value or inconsistent configuration combination.
    #[error("config error: {0}")]
    Config(String),

    /// Filesystem failure; the path names the offending file or directory.
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    /// Estimated resource usage exceeds the configured budget.
    #[error("resource budget exceeded: {0}")]
    Resource(String),
}

impl Error {
    pub fn shape(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Shape {
            op,
            msg: msg.into(),
        }
    }

    pub fn numerics(op: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Numerics {
            op: op.into(),
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
