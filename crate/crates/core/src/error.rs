use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite input: {0}")]
    NonFinite(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("integration diverged at t = {t:.4} s: state left the sanity box")]
    IntegrationDiverged { t: f64 },
    #[error("kernel matrix not positive definite after maximum jitter {jitter:.3e}")]
    NotPositiveDefinite { jitter: f64 },
    #[error("hyperparameter training failed: {0}")]
    TrainingFailed(String),
    #[error("posterior variance {0:.3e} is below the clamp tolerance")]
    NegativeVariance(f64),
    #[error("model identification failed: {0}")]
    Identification(String),
    #[error("tightened output set is empty: [{lo:.4}, {hi:.4}] shrunk by {backoff:.4}")]
    EmptyTightenedSet { lo: f64, hi: f64, backoff: f64 },
    #[error("optimal control problem infeasible: {0}")]
    InfeasibleOcp(String),
    #[error("QP solver failed: {0}")]
    QpFailed(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("parse error at row {row}: {msg}")]
    Parse { row: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
