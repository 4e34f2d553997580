//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, FedocError>;

#[derive(Debug, Error)]
pub enum FedocError {
    #[error("invalid config:\n  {}", violations.join("\n  "))]
    InvalidConfig { violations: Vec<String> },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {detail}")]
    IdxFormat { path: PathBuf, detail: String },

    #[error("infeasible geometry: {0}")]
    InfeasibleGeometry(String),

    #[error("client count mismatch: {0}")]
    CountMismatch(String),

    #[error("infeasible partition: class {class} needs {needed} samples, only {available} available")]
    InfeasiblePartition {
        class: usize,
        needed: usize,
        available: usize,
    },

    #[error("empty shard for client {0}")]
    EmptyShard(usize),

    #[error("mismatched runs: {0}")]
    MismatchedRuns(String),

    #[error("bound analysis requires a 3-cell chain, got {0} cells")]
    NotThreeCells(usize),

    #[error("bound evaluation requires rounds > kappa (got rounds = {rounds}, kappa = {kappa})")]
    WindowTooShort { rounds: usize, kappa: usize },

    #[error("{0}")]
    Other(String),
}

impl FedocError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FedocError::Io {
            path: path.into(),
            source,
        }
    }
}
