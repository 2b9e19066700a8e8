//! Error type shared by every module.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("query time {t} outside domain [{start}, {end}]")]
    OutOfDomain { t: f64, start: f64, end: f64 },

    #[error("numerical instability at step {step} (t = {t})")]
    Instability { step: usize, t: f64 },

    #[error("tolerance {tol:e} unachievable: {reason}")]
    Unachievable { tol: f64, reason: String },

    #[error("operator rejected: {0}")]
    OperatorRejected(String),

    #[error("budget missed at stage {stage}: achieved {achieved:e} > budget {budget:e}")]
    BudgetMiss {
        stage: String,
        achieved: f64,
        budget: f64,
    },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
