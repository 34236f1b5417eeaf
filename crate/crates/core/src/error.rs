use std::path::PathBuf;

use crate::AgentId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the simulator can surface.
///
/// Variants are grouped by the exit class the CLI maps them to; see
/// [`Error::class`].
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in `{operand}`: expected {expected}, got {got}")]
    Shape {
        operand: &'static str,
        expected: String,
        got: String,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("non-finite value in parameter block `{block}`")]
    NonFinite { block: String },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("barrier violation: agent {agent} {detail}")]
    Barrier { agent: AgentId, detail: String },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error(
        "training diverged: non-finite loss for agent {agent} at epoch {epoch}, batch {batch}"
    )]
    Divergence {
        agent: AgentId,
        epoch: usize,
        batch: usize,
    },

    #[error("invalid configuration for `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("schema mismatch in {path}: {message}")]
    Schema { path: PathBuf, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse classification used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Runtime,
    Io,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config { .. } => ErrorClass::Config,
            Error::Io { .. } | Error::Schema { .. } => ErrorClass::Io,
            _ => ErrorClass::Runtime,
        }
    }

    pub(crate) fn shape(
        operand: &'static str,
        expected: impl ToString,
        got: impl ToString,
    ) -> Self {
        Error::Shape {
            operand,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn schema(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Schema {
            path: path.into(),
            message: message.into(),
        }
    }
}
