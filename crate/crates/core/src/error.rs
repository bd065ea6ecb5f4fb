use thiserror::Error;

use crate::errors::ErrorBreakdown;

/// Errors raised by the estimators, models and drivers in this crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error(
        "sample failed at level {level}, index {sample_index} (seed {master_seed}, tag {replica_tag}): {reason}"
    )]
    Sample {
        level: usize,
        sample_index: u64,
        master_seed: u64,
        replica_tag: u64,
        reason: String,
    },

    #[error("solver diverged at level {level}: {reason}")]
    Diverged { level: usize, reason: String },

    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    #[error("θ = {theta} lies outside [{lo}, {hi}]")]
    Domain { theta: f64, lo: f64, hi: f64 },

    #[error("bias error is undefined for a single-level hierarchy")]
    BiasUndefined,

    #[error("minimiser θ = {theta} sits on the boundary of [{lo}, {hi}]")]
    BoundaryMinimiser { theta: f64, lo: f64, hi: f64 },

    #[error("hierarchy adaptation did not reach the tolerance after {rounds} rounds (mse {mse:.3e})")]
    NotConverged {
        rounds: usize,
        mse: f64,
        last: Box<ErrorBreakdown>,
    },

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }
}
