use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::library::{evaluate_library, CandidateLibrary};
use super::stls::{stls, StlsParams};
use super::{LabeledDataset, Result, SindyError};

/// Per-feature z-score transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
}

impl Standardizer {
    pub fn identity(num_vars: usize) -> Self {
        Self {
            means: vec![0.0; num_vars],
            scales: vec![1.0; num_vars],
        }
    }

    /// Column means and (n-1)-divisor standard deviations. Constant columns
    /// get scale 1 so they map to zero rather than NaN.
    pub fn fit(features: &DMatrix<f64>) -> Self {
        let p = features.nrows() as f64;
        let mut means = Vec::with_capacity(features.ncols());
        let mut scales = Vec::with_capacity(features.ncols());
        for col in features.column_iter() {
            let mean = col.iter().sum::<f64>() / p;
            let ss: f64 = col.iter().map(|v| (v - mean).powi(2)).sum();
            let sd = if p > 1.0 { (ss / (p - 1.0)).sqrt() } else { 0.0 };
            means.push(mean);
            scales.push(if sd > 0.0 && sd.is_finite() { sd } else { 1.0 });
        }
        Self { means, scales }
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    #[inline]
    pub fn apply_one(&self, j: usize, v: f64) -> f64 {
        (v - self.means[j]) / self.scales[j]
    }

    pub fn transform(&self, features: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(features.nrows(), features.ncols(), |i, j| {
            self.apply_one(j, features[(i, j)])
        })
    }
}

/// A fitted sparse polynomial model `y = psi(standardize(x)) . coefficients`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelRepr", into = "ModelRepr")]
pub struct SparseModel {
    pub library: CandidateLibrary,
    pub coefficients: Vec<f64>,
    pub threshold: f64,
    pub ridge_eps: f64,
    pub standardizer: Standardizer,
    pub feature_names: Vec<String>,
    pub trained_at: String,
    pub iterations_used: usize,
}

/// On-disk layout of a model.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelRepr {
    num_vars: usize,
    max_degree: u32,
    terms: Vec<Vec<u32>>,
    coefficients: Vec<f64>,
    threshold: f64,
    ridge_eps: f64,
    standardizer: Standardizer,
    feature_names: Vec<String>,
    trained_at: String,
    #[serde(default)]
    iterations_used: usize,
}

impl TryFrom<ModelRepr> for SparseModel {
    type Error = SindyError;

    fn try_from(r: ModelRepr) -> Result<Self> {
        let library = CandidateLibrary::from_terms(r.num_vars, r.max_degree, r.terms)?;
        if r.coefficients.len() != library.len() {
            return Err(SindyError::InvalidModel(format!(
                "{} coefficients for {} terms",
                r.coefficients.len(),
                library.len()
            )));
        }
        let m = library.num_vars;
        if r.standardizer.means.len() != m || r.standardizer.scales.len() != m || r.feature_names.len() != m {
            return Err(SindyError::InvalidModel(format!(
                "standardizer and feature names must have {m} entries"
            )));
        }
        if r.standardizer.scales.iter().any(|s| !(*s > 0.0)) {
            return Err(SindyError::InvalidModel("standardizer scales must be positive".into()));
        }
        Ok(Self {
            library,
            coefficients: r.coefficients,
            threshold: r.threshold,
            ridge_eps: r.ridge_eps,
            standardizer: r.standardizer,
            feature_names: r.feature_names,
            trained_at: r.trained_at,
            iterations_used: r.iterations_used,
        })
    }
}

impl From<SparseModel> for ModelRepr {
    fn from(m: SparseModel) -> Self {
        Self {
            num_vars: m.library.num_vars,
            max_degree: m.library.max_degree,
            terms: m.library.terms,
            coefficients: m.coefficients,
            threshold: m.threshold,
            ridge_eps: m.ridge_eps,
            standardizer: m.standardizer,
            feature_names: m.feature_names,
            trained_at: m.trained_at,
            iterations_used: m.iterations_used,
        }
    }
}

impl SparseModel {
    pub fn num_vars(&self) -> usize {
        self.library.num_vars
    }

    pub fn nnz(&self) -> usize {
        self.coefficients.iter().filter(|c| **c != 0.0).count()
    }

    /// Indices of the non-zero terms.
    pub fn support(&self) -> Vec<usize> {
        (0..self.coefficients.len())
            .filter(|&k| self.coefficients[k] != 0.0)
            .collect()
    }

    fn check_dim(&self, m: usize) -> Result<()> {
        if m != self.num_vars() {
            return Err(SindyError::ShapeMismatch {
                expected: format!("{} features", self.num_vars()),
                found: m.to_string(),
            });
        }
        Ok(())
    }

    /// Predicts one snapshot. Walks only the non-zero terms and allocates
    /// nothing.
    pub fn predict_one(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x.len())?;
        let mut total = 0.0;
        for (term, &c) in self.library.terms.iter().zip(&self.coefficients) {
            if c == 0.0 {
                continue;
            }
            let mut value = c;
            for (j, &e) in term.iter().enumerate() {
                if e > 0 {
                    value *= self.standardizer.apply_one(j, x[j]).powi(e as i32);
                }
            }
            total += value;
        }
        Ok(total)
    }

    pub fn predict(&self, features: &DMatrix<f64>) -> Result<Vec<f64>> {
        self.check_dim(features.ncols())?;
        let mut row = vec![0.0; features.ncols()];
        (0..features.nrows())
            .map(|i| {
                for (j, slot) in row.iter_mut().enumerate() {
                    *slot = features[(i, j)];
                }
                self.predict_one(&row)
            })
            .collect()
    }

    /// Human-readable equation, one `coef * term` per line.
    pub fn describe(&self) -> String {
        use super::Library;
        self.support()
            .into_iter()
            .map(|k| {
                format!(
                    "{:+.6e} * {}",
                    self.coefficients[k],
                    self.library.term_name(k, &self.feature_names)
                )
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| SindyError::InvalidModel(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        std::fs::write(path, self.to_json())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| SindyError::InvalidModel(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_json(&text)
    }
}

/// Fits a static sparse model of the labels on the dataset features:
/// standardize, evaluate the degree-`degree` library, then STLS.
pub fn fit_static(dataset: &LabeledDataset, degree: u32, params: &StlsParams, trained_at: &str) -> Result<SparseModel> {
    let standardizer = Standardizer::fit(&dataset.features);
    let z = standardizer.transform(&dataset.features);
    let library = CandidateLibrary::new(dataset.num_features(), degree)?;
    let design = evaluate_library(&library, &z)?;
    let fit = stls(&design, &dataset.labels, params)?;
    Ok(SparseModel {
        library,
        coefficients: fit.coefficients,
        threshold: params.threshold,
        ridge_eps: params.ridge_eps,
        standardizer,
        feature_names: dataset.feature_names.clone(),
        trained_at: trained_at.to_string(),
        iterations_used: fit.iterations,
    })
}
