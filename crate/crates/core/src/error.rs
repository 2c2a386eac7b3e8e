use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("subgraph is not deterministic: repeated evaluation gave {first} then {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("unknown tap point `{0}`")]
    UnknownTap(String),

    #[error("corrupt file{}: {reason}", offset.map(|o| format!(" at byte {o}")).unwrap_or_default())]
    Corrupt { reason: String, offset: Option<u64> },

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("topology mismatch: checkpoint {checkpoint:016x}, network {network:016x}")]
    Topology { checkpoint: u64, network: u64 },

    #[error("infeasible synthetic spec: {0}")]
    Infeasible(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn corrupt(reason: impl Into<String>, offset: Option<u64>) -> Self {
        Error::Corrupt { reason: reason.into(), offset }
    }

    /// Whether the error stems from user-supplied configuration or inputs
    /// that disagree with it, rather than a failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Infeasible(_) | Error::InvalidArgument(_) | Error::Topology { .. } | Error::UnknownTap(_)
        )
    }
}
