use nalgebra::DMatrix;

use super::library::{evaluate_library, CandidateLibrary};
use super::model::{SparseModel, Standardizer};
use super::stls::{stls, StlsParams};
use super::{Result, SindyError};

/// Time-derivative estimates with the same shape as the state snapshots.
pub type DerivativeSnapshots = DMatrix<f64>;

/// Forward differences `(x[k+1] - x[k]) / dt`; the last row repeats the
/// backward difference so the output keeps the input shape.
pub fn finite_difference(states: &DMatrix<f64>, dt: f64) -> Result<DerivativeSnapshots> {
    let (p, m) = states.shape();
    if p < 2 {
        return Err(SindyError::TooFewSnapshots(p));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(SindyError::InvalidParameter(format!("dt must be positive, got {dt}")));
    }
    Ok(DMatrix::from_fn(p, m, |k, j| {
        let k = k.min(p - 2);
        (states[(k + 1, j)] - states[(k, j)]) / dt
    }))
}

/// Identifies `dx/dt = psi(x) . Sigma` from a uniformly sampled trajectory,
/// one model per state dimension.
///
/// A dimension whose derivative is identically zero has no term above any
/// positive threshold and reports [`SindyError::NoActiveTerms`].
pub fn fit_dynamics(states: &DMatrix<f64>, dt: f64, degree: u32, threshold: f64) -> Result<Vec<SparseModel>> {
    let derivatives = finite_difference(states, dt)?;
    let params = StlsParams {
        threshold,
        ..StlsParams::default()
    };
    fit_dynamics_with_derivatives(states, &derivatives, degree, &params)
}

/// As [`fit_dynamics`] with caller-supplied derivatives.
pub fn fit_dynamics_with_derivatives(
    states: &DMatrix<f64>,
    derivatives: &DMatrix<f64>,
    degree: u32,
    params: &StlsParams,
) -> Result<Vec<SparseModel>> {
    if states.shape() != derivatives.shape() {
        return Err(SindyError::ShapeMismatch {
            expected: format!("{:?}", states.shape()),
            found: format!("{:?}", derivatives.shape()),
        });
    }
    let m = states.ncols();
    let library = CandidateLibrary::new(m, degree)?;
    let design = evaluate_library(&library, states)?;
    let names: Vec<String> = (1..=m).map(|i| format!("x{i}")).collect();
    (0..m)
        .map(|j| {
            let target: Vec<f64> = derivatives.column(j).iter().copied().collect();
            let fit = stls(&design, &target, params)?;
            Ok(SparseModel {
                library: library.clone(),
                coefficients: fit.coefficients,
                threshold: params.threshold,
                ridge_eps: params.ridge_eps,
                standardizer: Standardizer::identity(m),
                feature_names: names.clone(),
                trained_at: String::new(),
                iterations_used: fit.iterations,
            })
        })
        .collect()
}
