use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every fault the library can raise.
///
/// Variants are grouped by the exit code the command-line tool maps them to:
/// configuration faults (2), data/trace faults (3) and numerical aborts (4).
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration: {0}")]
    Config(String),

    #[error("data: {0}")]
    Data(String),

    #[error("trace {path}:{line}: {msg}")]
    Trace {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("non-finite value in layer {layer}: {what}")]
    NonFiniteLayer { layer: usize, what: String },

    #[error("non-finite output from expert {expert} in layer {layer}")]
    NonFiniteExpert { layer: usize, expert: usize },

    #[error("non-finite gradient in parameter block `{block}`")]
    NonFiniteGradient { block: String },

    #[error("loss became non-finite at step {step}")]
    NanLoss { step: usize },

    #[error("backward cache is stale: built at parameter version {cache}, network is at {network}")]
    StaleCache { cache: u64, network: u64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this fault class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Trace { .. } | Error::Csv(_) | Error::Json(_) => 3,
            Error::Checkpoint(_) | Error::Io { .. } => 3,
            Error::NonFiniteLayer { .. }
            | Error::NonFiniteExpert { .. }
            | Error::NonFiniteGradient { .. }
            | Error::NanLoss { .. }
            | Error::StaleCache { .. } => 4,
        }
    }
}
