//! Sparse identification over polynomial candidate libraries.
//!
//! The same machinery serves two problems: the static regression of SOH on
//! a feature snapshot, and continuous-time dynamics identification where
//! each state derivative is regressed on the library evaluated at the
//! state.

mod dynamics;
mod library;
mod model;
mod stls;

pub use dynamics::{finite_difference, fit_dynamics, fit_dynamics_with_derivatives, DerivativeSnapshots};
pub use library::{evaluate_library, AugmentedLibrary, CandidateLibrary, ExtraTerm, Library};
pub use model::{fit_static, SparseModel, Standardizer};
pub use stls::{least_squares, stls, StlsFit, StlsParams};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SindyError {
    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },
    #[error("threshold {threshold} eliminated every candidate term")]
    NoActiveTerms { threshold: f64 },
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error("need at least 2 snapshots, got {0}")]
    TooFewSnapshots(usize),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("invalid model file: {0}")]
    InvalidModel(String),
}

pub type Result<T, E = SindyError> = std::result::Result<T, E>;

/// Where a dataset row came from.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RowSource {
    pub cell_id: String,
    pub cycle_index: u32,
}

/// Feature snapshots (p rows by m columns) paired with SOH labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub features: DMatrix<f64>,
    pub labels: Vec<f64>,
    pub feature_names: Vec<String>,
    pub provenance: Vec<RowSource>,
}

impl LabeledDataset {
    pub fn new(
        features: DMatrix<f64>,
        labels: Vec<f64>,
        feature_names: Vec<String>,
        provenance: Vec<RowSource>,
    ) -> Result<Self> {
        let (p, m) = features.shape();
        if p == 0 {
            return Err(SindyError::InvalidParameter("dataset has no rows".into()));
        }
        if labels.len() != p || provenance.len() != p {
            return Err(SindyError::ShapeMismatch {
                expected: format!("{p} labels and provenance entries"),
                found: format!("{} labels, {} provenance entries", labels.len(), provenance.len()),
            });
        }
        if feature_names.len() != m {
            return Err(SindyError::ShapeMismatch {
                expected: format!("{m} feature names"),
                found: feature_names.len().to_string(),
            });
        }
        Ok(Self {
            features,
            labels,
            feature_names,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.features.ncols()
    }

    /// Keeps the named columns, in the order given.
    pub fn select(&self, names: &[String]) -> Result<Self> {
        let idx = names
            .iter()
            .map(|n| {
                self.feature_names
                    .iter()
                    .position(|f| f == n)
                    .ok_or_else(|| SindyError::InvalidParameter(format!("unknown feature {n:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let features = self.features.select_columns(&idx);
        Self::new(features, self.labels.clone(), names.to_vec(), self.provenance.clone())
    }
}
