use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by the simulator.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shapes, ranges, sizes).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A loss or gradient evaluation produced a NaN or infinity.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// SGD iterates became non-finite.
    #[error("divergence at step {step}{}", client.map(|c| format!(" on client {c}")).unwrap_or_default())]
    Divergence { step: usize, client: Option<u64> },

    #[error("capacity exceeded: parameter count {dim} is above the oracle cap {cap}")]
    Capacity { dim: usize, cap: usize },

    /// A precondition of an analysis routine does not hold for the given trace.
    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("schema error at line {line}: {message}")]
    Schema { line: usize, message: String },

    #[error("file not found: {}", .0.display())]
    FileNotFound(PathBuf),

    #[error("version error: {0}")]
    Version(String),

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::FileNotFound(path)
        } else {
            Error::Io { path, source }
        }
    }

    /// Attach a client id to a divergence error raised inside a client's local loop.
    pub fn with_client(self, id: u64) -> Self {
        match self {
            Error::Divergence { step, .. } => Error::Divergence { step, client: Some(id) },
            other => other,
        }
    }
}
