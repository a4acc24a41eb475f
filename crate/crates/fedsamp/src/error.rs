//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("estimator undefined: client {client} has positive norm but zero probability")]
    ZeroProbability { client: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("oracle did not converge; best objective so far {best}")]
    OracleNonConvergence { best: f64 },

    #[error("reference solve did not converge; gradient norm {grad_norm}")]
    ReferenceSolve { grad_norm: f64 },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("run diverged at seed {seed}, round {round}")]
    Diverged { seed: u64, round: u64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
