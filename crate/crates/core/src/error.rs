use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    /// A generation step could not be completed because some experts failed.
    #[error("backend step failed for experts {expert_ids:?}: {detail}")]
    Step {
        expert_ids: Vec<usize>,
        detail: String,
    },

    /// A single request failed in a way that may succeed on retry.
    #[error("retryable backend error: {0}")]
    Retryable(String),

    /// The server answered, but not in the expected shape.
    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("{path}:{line}: {detail}")]
    Fixture {
        path: PathBuf,
        line: usize,
        detail: String,
    },

    #[error("internal error: {0}")]
    Internal(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 1 configuration, 2 backend, 3 fixture.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Step { .. } | Error::Retryable(_) | Error::Protocol(_) => 2,
            Error::Fixture { .. } => 3,
            _ => 1,
        }
    }

    pub fn is_retryable(&self) -> bool {
        matches!(self, Error::Retryable(_))
    }
}
