use nalgebra::{DMatrix, DVector};

use super::{EvalError, Result};
use crate::sindy::{evaluate_library, CandidateLibrary, LabeledDataset, SparseModel, Standardizer};

const GRAM_JITTER: f64 = 1e-10;

/// Dense ridge regression over the polynomial library. Never thresholded.
#[derive(Debug, Clone, PartialEq)]
pub struct RidgeModel {
    pub model: SparseModel,
    pub alpha: f64,
}

impl RidgeModel {
    pub fn predict_one(&self, x: &[f64]) -> Result<f64> {
        Ok(self.model.predict_one(x)?)
    }
}

/// Solves `(Psi^T Psi + alpha I) c = Psi^T y` on standardized features.
pub fn fit_ridge(dataset: &LabeledDataset, degree: u32, alpha: f64) -> Result<RidgeModel> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(EvalError::InvalidParameter(format!("alpha must be >= 0, got {alpha}")));
    }
    let standardizer = Standardizer::fit(&dataset.features);
    let library = CandidateLibrary::new(dataset.num_features(), degree)?;
    let design = evaluate_library(&library, &standardizer.transform(&dataset.features))?;
    let mut gram = design.transpose() * &design;
    for i in 0..gram.nrows() {
        gram[(i, i)] += alpha;
    }
    let rhs = design.transpose() * DVector::from_column_slice(&dataset.labels);
    let coefficients = gram
        .cholesky()
        .ok_or_else(|| EvalError::NumericalFailure(format!("ridge system not positive definite at alpha={alpha}")))?
        .solve(&rhs);
    if coefficients.iter().any(|c| !c.is_finite()) {
        return Err(EvalError::NumericalFailure("non-finite ridge coefficients".into()));
    }
    Ok(RidgeModel {
        model: SparseModel {
            library,
            coefficients: coefficients.iter().copied().collect(),
            threshold: 0.0,
            ridge_eps: alpha,
            standardizer,
            feature_names: dataset.feature_names.clone(),
            trained_at: String::new(),
            iterations_used: 1,
        },
        alpha,
    })
}

/// Squared-exponential kernel ridge regression that keeps every training
/// row; prediction cost grows linearly with the training set.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelRegressor {
    pub standardizer: Standardizer,
    /// Standardized training rows, row-major.
    pub support: Vec<f64>,
    pub weights: Vec<f64>,
    pub label_mean: f64,
    pub lengthscale: f64,
    pub noise_sd: f64,
    num_vars: usize,
}

impl KernelRegressor {
    pub fn num_support(&self) -> usize {
        self.weights.len()
    }

    pub fn predict_one(&self, x: &[f64]) -> Result<f64> {
        let m = self.num_vars;
        if x.len() != m {
            return Err(EvalError::InvalidParameter(format!(
                "expected {m} features, found {}",
                x.len()
            )));
        }
        let gamma = 0.5 / (self.lengthscale * self.lengthscale);
        let mut acc = 0.0;
        for (row, w) in self.support.chunks_exact(m).zip(&self.weights) {
            let mut d2 = 0.0;
            for (j, r) in row.iter().enumerate() {
                let d = self.standardizer.apply_one(j, x[j]) - r;
                d2 += d * d;
            }
            acc += w * (-gamma * d2).exp();
        }
        Ok(self.label_mean + acc)
    }
}

pub fn fit_kernel_baseline(dataset: &LabeledDataset, lengthscale: f64, noise_sd: f64) -> Result<KernelRegressor> {
    let p = dataset.len();
    if p < 2 {
        return Err(EvalError::InvalidParameter(format!(
            "kernel baseline needs >= 2 rows, got {p}"
        )));
    }
    if !(lengthscale > 0.0) || !(noise_sd >= 0.0) {
        return Err(EvalError::InvalidParameter(format!(
            "lengthscale {lengthscale} must be > 0 and noise_sd {noise_sd} >= 0"
        )));
    }
    let m = dataset.num_features();
    let standardizer = Standardizer::fit(&dataset.features);
    let z = standardizer.transform(&dataset.features);
    let support: Vec<f64> = (0..p)
        .flat_map(|i| (0..m).map(move |j| (i, j)))
        .map(|(i, j)| z[(i, j)])
        .collect();
    let gamma = 0.5 / (lengthscale * lengthscale);
    let mut gram = DMatrix::zeros(p, p);
    for i in 0..p {
        for k in 0..=i {
            let d2: f64 = (0..m).map(|j| (support[i * m + j] - support[k * m + j]).powi(2)).sum();
            let v = (-gamma * d2).exp();
            gram[(i, k)] = v;
            gram[(k, i)] = v;
        }
        gram[(i, i)] += noise_sd * noise_sd + GRAM_JITTER;
    }
    let label_mean = dataset.labels.iter().sum::<f64>() / p as f64;
    let centered = DVector::from_iterator(p, dataset.labels.iter().map(|y| y - label_mean));
    let weights = gram
        .cholesky()
        .ok_or_else(|| EvalError::NumericalFailure("kernel Gram matrix is not positive definite".into()))?
        .solve(&centered);
    Ok(KernelRegressor {
        standardizer,
        support,
        weights: weights.iter().copied().collect(),
        label_mean,
        lengthscale,
        noise_sd,
        num_vars: m,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::NormalStream;
    use crate::sindy::{least_squares, RowSource};

    fn dataset(p: usize, m: usize, seed: u64, f: impl Fn(&[f64]) -> f64) -> LabeledDataset {
        let mut g = NormalStream::new(seed);
        let features = DMatrix::from_fn(p, m, |_, _| g.next_standard());
        let labels = (0..p)
            .map(|i| f(&features.row(i).iter().copied().collect::<Vec<_>>()))
            .collect();
        let names = (0..m).map(|j| format!("x{j}")).collect();
        let provenance = (0..p)
            .map(|i| RowSource {
                cell_id: "c".into(),
                cycle_index: i as u32,
            })
            .collect();
        LabeledDataset::new(features, labels, names, provenance).unwrap()
    }

    #[test]
    fn ridge_limit_is_least_squares() {
        let ds = dataset(60, 2, 1, |x| 1.0 + x[0] - 0.5 * x[1] * x[1]);
        let ridge = fit_ridge(&ds, 2, 0.0).unwrap();
        let st = &ridge.model.standardizer;
        let design = evaluate_library(&ridge.model.library, &st.transform(&ds.features)).unwrap();
        let cols: Vec<usize> = (0..design.ncols()).collect();
        let ls = least_squares(&design, &ds.labels, &cols, 0.0).unwrap();
        for (a, b) in ridge.model.coefficients.iter().zip(&ls) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn ridge_shrinks_with_alpha() {
        let ds = dataset(60, 3, 2, |x| 2.0 * x[0] + x[1] * x[2]);
        let mut last = f64::INFINITY;
        for alpha in [0.0, 0.1, 1.0, 10.0, 100.0, 1e4] {
            let norm: f64 = fit_ridge(&ds, 3, alpha)
                .unwrap()
                .model
                .coefficients
                .iter()
                .map(|c| c * c)
                .sum();
            assert!(norm <= last);
            last = norm;
        }
        assert!(last < 1e-2);
    }

    #[test]
    fn kernel_interpolates_training_points() {
        let ds = dataset(40, 2, 3, |x| x[0].sin() + x[1]);
        let k = fit_kernel_baseline(&ds, 1.0, 0.0).unwrap();
        for i in 0..ds.len() {
            let x: Vec<f64> = ds.features.row(i).iter().copied().collect();
            assert!((k.predict_one(&x).unwrap() - ds.labels[i]).abs() < 1e-6);
        }
        assert_eq!(k.num_support(), 40);
    }

    #[test]
    fn flat_kernel_predicts_the_mean() {
        let ds = dataset(30, 2, 4, |x| 3.0 * x[0]);
        let mean = ds.labels.iter().sum::<f64>() / 30.0;
        let k = fit_kernel_baseline(&ds, 1e6, 0.1).unwrap();
        assert!((k.predict_one(&[0.3, -2.0]).unwrap() - mean).abs() < 1e-3);
    }

    #[test]
    fn kernel_needs_two_rows() {
        let ds = dataset(1, 2, 5, |x| x[0]);
        assert!(fit_kernel_baseline(&ds, 1.0, 0.1).is_err());
    }
}
