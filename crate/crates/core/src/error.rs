use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite (jitter ladder exhausted at {jitter:e})")]
    NotPositiveDefinite { jitter: f64 },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("eigenvalue iteration did not converge")]
    ConvergenceFailure,

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("search box is empty or degenerate")]
    EmptyBox,

    #[error("pool of {pool} candidates is too small for a batch of {batch}")]
    PoolTooSmall { pool: usize, batch: usize },

    #[error("no feasible start found for the safety constraint")]
    NoFeasibleStart,

    #[error("history is empty")]
    EmptyHistory,

    #[error("finite-difference stencil leaves the domain")]
    DomainViolation,

    #[error("neighbourhood is collinear; gradient is not identifiable")]
    CollinearNeighborhood,

    #[error("need at least {needed} points, got {found}")]
    TooFewPoints { needed: usize, found: usize },

    #[error("input history too short: need {needed} steps, got {found}")]
    HistoryTooShort { needed: usize, found: usize },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("file {0} contains no data")]
    EmptyFile(PathBuf),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
