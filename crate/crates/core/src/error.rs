use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("deadband crossing not resolved: {0}")]
    NonConvergence(String),

    /// The preference band has zero width; the load cannot express a price response.
    #[error("degenerate preferences: t_min == t_max == {0} F")]
    DegeneratePrefs(f64),

    #[error("unresponsive power {unresponsive_kw} kW exceeds feeder capacity {capacity_kw} kW")]
    Infeasible { unresponsive_kw: f64, capacity_kw: f64 },

    #[error("capacity must be non-negative, got {0}")]
    InfeasibleCapacity(f64),

    #[error("innovation variance is not positive at step {step}")]
    NumericalBreakdown { step: usize },

    #[error("predicted covariance is singular at step {step}")]
    SingularPrediction { step: usize },

    #[error("M-step is rank deficient: {0}")]
    RankDeficient(&'static str),

    #[error("schema error in {path}: {msg}")]
    Schema { path: String, msg: String },

    #[error("data gap in {path}: missing {timestamp}")]
    DataGap { path: String, timestamp: String },

    #[error("file not found: {}", .0.display())]
    MissingFile(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn schema(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Schema {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
