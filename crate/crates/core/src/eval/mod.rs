//! Error metrics, baseline regressors and the timing harness.

mod baselines;
mod bench;
mod metrics;

pub use baselines::{fit_kernel_baseline, fit_ridge, KernelRegressor, RidgeModel};
pub use bench::{bench, render_metric_table, render_timing_table, Fitted, Method, TimingReport};
pub use metrics::{metrics, MetricReport};

use thiserror::Error;

use crate::sindy::SindyError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: {0} predictions vs {1} actual values")]
    LengthMismatch(usize, usize),
    #[error("cannot score an empty set")]
    Empty,
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Sindy(#[from] SindyError),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;
