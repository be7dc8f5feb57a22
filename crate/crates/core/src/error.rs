use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("mass matrix M_RB + M_A is singular or ill-conditioned (condition number {cond:e})")]
    SingularMass { cond: f64 },

    #[error("invalid vessel parameter `{field}`: {reason}")]
    VesselParam { field: &'static str, reason: String },

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("scenario validation failed: {0}")]
    Validation(String),

    #[error("failed to parse {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("scenario mismatch: log `{left}` has config hash {left_hash}, log `{right}` has {right_hash}")]
    ScenarioMismatch {
        left: String,
        left_hash: String,
        right: String,
        right_hash: String,
    },

    #[error("{0}")]
    Comparison(String),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
