//! Training and applying a SOH estimator from raw charge logs.
//!
//! Each charge cycle is reduced to a [`CycleObservation`] (its coulomb-counted
//! capacity and the seven CV-segment features) as soon as it is parsed, so
//! sample-level data never has to be held for a whole fleet.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{debug, info, warn};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{metrics, EvalError, Method, MetricReport};
use crate::features::{
    correlation_gate, extract_features, CorrelationReport, FeatureError, FeatureVector, FEATURE_NAMES,
};
use crate::ingest::{
    charge_capacity, label_capacities, parse_cycles, split_cc_cv, ChargeCycle, IngestError, ProtocolConfig, Smoothing,
};
use crate::simulate::{GroundTruth, GROUND_TRUTH_FILE};
use crate::sindy::{fit_static, LabeledDataset, RowSource, SindyError, SparseModel, StlsParams};

pub const SCHEMA_VERSION: u32 = 1;
pub const ESTIMATOR_FILE_SUFFIX: &str = ".sindy-soh.json";
pub const ESTIMATE_CSV_HEADER: [&str; 3] = ["cell_id", "cycle_index", "soh_est_pct"];
/// Minimum labelled cycles for a training cell to contribute rows.
pub const MIN_CYCLES_PER_CELL: usize = 3;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Sindy(#[from] SindyError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("no feature reached |rho| >= {gate}")]
    NoFeaturesSelected { gate: f64 },
    #[error("invalid pipeline config: {0}")]
    InvalidConfig(String),
    #[error("{path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("estimator schema mismatch: expected version {expected}, found {found}")]
    SchemaVersionMismatch { expected: u32, found: String },
    #[error("malformed estimator file: {0}")]
    Malformed(String),
}

impl EstimatorError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        Self::IoFailure {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T, E = EstimatorError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub protocol: ProtocolConfig,
    pub smoothing: Smoothing,
    pub library_degree: u32,
    pub stls: StlsParams,
    pub correlation_gate: f64,
    /// Cells excluded from every training statistic.
    pub holdout: Vec<String>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            protocol: ProtocolConfig::default(),
            smoothing: Smoothing::default(),
            library_degree: 3,
            stls: StlsParams::default(),
            correlation_gate: crate::features::DEFAULT_GATE,
            holdout: Vec::new(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.protocol.validate()?;
        self.stls.validate()?;
        if self.library_degree < 1 {
            return Err(EstimatorError::InvalidConfig("library_degree must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.correlation_gate) {
            return Err(EstimatorError::InvalidConfig(format!(
                "correlation_gate must lie in [0, 1], got {}",
                self.correlation_gate
            )));
        }
        Ok(())
    }

    pub fn is_holdout(&self, cell_id: &str) -> bool {
        self.holdout.iter().any(|h| h == cell_id)
    }
}

/// One charge cycle reduced to what training and estimation need.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleObservation {
    pub cell_id: String,
    pub cycle_index: u32,
    pub capacity_ah: f64,
    pub features: FeatureVector,
}

/// A cycle that could not be used, with the reason.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedCycle {
    pub cell_id: String,
    pub cycle_index: u32,
    pub reason: String,
}

pub fn observe_cycle(cycle: &ChargeCycle, protocol: &ProtocolConfig) -> Result<CycleObservation> {
    let (cc, cv) = split_cc_cv(cycle, protocol)?;
    let capacity_ah = charge_capacity(&cc, &cv)?;
    let features = extract_features(&cv)?;
    Ok(CycleObservation {
        cell_id: cycle.cell_id.clone(),
        cycle_index: cycle.cycle_index,
        capacity_ah,
        features,
    })
}

/// Observes every cycle; failures are collected rather than propagated.
pub fn observe_cycles(cycles: &[ChargeCycle], protocol: &ProtocolConfig) -> (Vec<CycleObservation>, Vec<SkippedCycle>) {
    let mut observations = Vec::with_capacity(cycles.len());
    let mut skipped = Vec::new();
    for cycle in cycles {
        match observe_cycle(cycle, protocol) {
            Ok(o) => observations.push(o),
            Err(e) => {
                warn!("skipping {} cycle {}: {e}", cycle.cell_id, cycle.cycle_index);
                skipped.push(SkippedCycle {
                    cell_id: cycle.cell_id.clone(),
                    cycle_index: cycle.cycle_index,
                    reason: e.to_string(),
                });
            }
        }
    }
    (observations, skipped)
}

pub fn observe_file(path: &Path, protocol: &ProtocolConfig) -> Result<(Vec<CycleObservation>, Vec<SkippedCycle>)> {
    let cycles = parse_cycles(path)?;
    debug!("{}: {} cycles", path.display(), cycles.len());
    Ok(observe_cycles(&cycles, protocol))
}

/// Cycle CSV files under `path`: the file itself, or every `*.csv` in the
/// directory except the ground-truth file, sorted by name.
pub fn cycle_files(path: &Path) -> Result<Vec<PathBuf>> {
    if !path.is_dir() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files = Vec::new();
    for entry in std::fs::read_dir(path).map_err(|e| EstimatorError::io(path, e))? {
        let p = entry.map_err(|e| EstimatorError::io(path, e))?.path();
        let is_csv = p.extension().is_some_and(|e| e == "csv");
        let is_truth = p.file_name().is_some_and(|n| n == GROUND_TRUTH_FILE);
        if p.is_file() && is_csv && !is_truth {
            files.push(p);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(EstimatorError::InsufficientData(format!(
            "no cycle CSV files in {}",
            path.display()
        )));
    }
    Ok(files)
}

/// Observes every cycle file under `path` one file at a time.
pub fn observe_path(path: &Path, protocol: &ProtocolConfig) -> Result<(Vec<CycleObservation>, Vec<SkippedCycle>)> {
    let mut observations = Vec::new();
    let mut skipped = Vec::new();
    for file in cycle_files(path)? {
        let (o, s) = observe_file(&file, protocol)?;
        observations.extend(o);
        skipped.extend(s);
    }
    sort_observations(&mut observations);
    Ok((observations, skipped))
}

fn sort_observations(observations: &mut [CycleObservation]) {
    observations.sort_by(|a, b| (&a.cell_id, a.cycle_index).cmp(&(&b.cell_id, b.cycle_index)));
}

/// Builds the labelled seven-feature dataset from the cells accepted by
/// `keep`. Capacities outside `(0, 1.2 * nominal]` are skipped; cells with
/// fewer than [`MIN_CYCLES_PER_CELL`] usable cycles contribute no rows.
pub fn labeled_dataset(
    observations: &[CycleObservation],
    config: &PipelineConfig,
    keep: impl Fn(&str) -> bool,
) -> Result<(LabeledDataset, Vec<SkippedCycle>)> {
    let limit = 1.2 * config.protocol.nominal_capacity_ah;
    let mut by_cell: BTreeMap<&str, Vec<&CycleObservation>> = BTreeMap::new();
    let mut skipped = Vec::new();
    for o in observations.iter().filter(|o| keep(&o.cell_id)) {
        if o.capacity_ah > 0.0 && o.capacity_ah <= limit {
            by_cell.entry(&o.cell_id).or_default().push(o);
        } else {
            skipped.push(SkippedCycle {
                cell_id: o.cell_id.clone(),
                cycle_index: o.cycle_index,
                reason: format!("capacity {} Ah outside (0, {limit}] Ah", o.capacity_ah),
            });
        }
    }
    let mut rows: Vec<[f64; 7]> = Vec::new();
    let mut labels = Vec::new();
    let mut provenance = Vec::new();
    for (cell, mut obs) in by_cell {
        if obs.len() < MIN_CYCLES_PER_CELL {
            warn!("cell {cell}: only {} usable cycles, excluded", obs.len());
            skipped.extend(obs.iter().map(|o| SkippedCycle {
                cell_id: o.cell_id.clone(),
                cycle_index: o.cycle_index,
                reason: format!("cell has fewer than {MIN_CYCLES_PER_CELL} usable cycles"),
            }));
            continue;
        }
        obs.sort_by_key(|o| o.cycle_index);
        let capacities: Vec<(u32, f64)> = obs.iter().map(|o| (o.cycle_index, o.capacity_ah)).collect();
        let cell_labels = label_capacities(cell, &capacities, config.smoothing, &config.protocol)?;
        for (o, l) in obs.iter().zip(cell_labels) {
            rows.push(o.features.to_array());
            labels.push(l.soh_pct);
            provenance.push(RowSource {
                cell_id: o.cell_id.clone(),
                cycle_index: o.cycle_index,
            });
        }
    }
    if rows.is_empty() {
        return Err(EstimatorError::InsufficientData(format!(
            "no cell with at least {MIN_CYCLES_PER_CELL} usable cycles"
        )));
    }
    let features = DMatrix::from_fn(rows.len(), 7, |i, j| rows[i][j]);
    let names = FEATURE_NAMES.iter().map(|s| s.to_string()).collect();
    Ok((LabeledDataset::new(features, labels, names, provenance)?, skipped))
}

/// A trained pipeline: gate report, sparse model and training fit quality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedEstimator {
    pub schema_version: u32,
    pub config: PipelineConfig,
    pub report: CorrelationReport,
    pub model: SparseModel,
    pub train_metrics: MetricReport,
}

pub fn train_from_observations(
    observations: &[CycleObservation],
    config: &PipelineConfig,
    trained_at: &str,
) -> Result<TrainedEstimator> {
    config.validate()?;
    let (all, skipped) = labeled_dataset(observations, config, |c| !config.is_holdout(c))?;
    for s in &skipped {
        debug!("not trained on {} cycle {}: {}", s.cell_id, s.cycle_index, s.reason);
    }
    let report = correlation_gate(&all, config.correlation_gate)?;
    if report.selected.is_empty() {
        return Err(EstimatorError::NoFeaturesSelected {
            gate: config.correlation_gate,
        });
    }
    info!("selected features: {}", report.selected.join(", "));
    let dataset = all.select(&report.selected)?;
    let model = fit_static(&dataset, config.library_degree, &config.stls, trained_at)?;
    info!("{} of {} library terms active", model.nnz(), model.library.len());
    let fitted = model.predict(&dataset.features)?;
    let train_metrics = metrics(&fitted, &dataset.labels)?;
    Ok(TrainedEstimator {
        schema_version: SCHEMA_VERSION,
        config: config.clone(),
        report,
        model,
        train_metrics,
    })
}

pub fn train_from_cycles(
    cycles: &[ChargeCycle],
    config: &PipelineConfig,
    trained_at: &str,
) -> Result<TrainedEstimator> {
    let (mut observations, _) = observe_cycles(cycles, &config.protocol);
    sort_observations(&mut observations);
    train_from_observations(&observations, config, trained_at)
}

/// Trains from a cycle file or a directory of cycle files.
pub fn train(path: &Path, config: &PipelineConfig, trained_at: &str) -> Result<TrainedEstimator> {
    let (observations, _) = observe_path(path, &config.protocol)?;
    train_from_observations(&observations, config, trained_at)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SohEstimate {
    pub cell_id: String,
    pub cycle_index: u32,
    pub soh_est_pct: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EstimateOutput {
    pub estimates: Vec<SohEstimate>,
    pub skipped: Vec<SkippedCycle>,
}

impl TrainedEstimator {
    fn feature_indices(&self) -> Result<Vec<usize>> {
        self.model
            .feature_names
            .iter()
            .map(|n| {
                FEATURE_NAMES
                    .iter()
                    .position(|f| f == n)
                    .ok_or_else(|| EstimatorError::Malformed(format!("unknown feature {n:?}")))
            })
            .collect()
    }

    /// Predicts SOH for one observation from the gate-selected features.
    pub fn predict(&self, features: &FeatureVector) -> Result<f64> {
        let all = features.to_array();
        let x: Vec<f64> = self.feature_indices()?.into_iter().map(|j| all[j]).collect();
        Ok(self.model.predict_one(&x)?)
    }

    /// Estimates every observation, ordered by cell then cycle index.
    pub fn estimate_observations(&self, observations: &[CycleObservation]) -> Result<Vec<SohEstimate>> {
        let indices = self.feature_indices()?;
        let mut x = vec![0.0; indices.len()];
        let mut out = Vec::with_capacity(observations.len());
        for o in observations {
            let all = o.features.to_array();
            for (slot, &j) in x.iter_mut().zip(&indices) {
                *slot = all[j];
            }
            out.push(SohEstimate {
                cell_id: o.cell_id.clone(),
                cycle_index: o.cycle_index,
                soh_est_pct: self.model.predict_one(&x)?,
            });
        }
        out.sort_by(|a, b| (&a.cell_id, a.cycle_index).cmp(&(&b.cell_id, b.cycle_index)));
        Ok(out)
    }

    /// Cycles without a usable CV phase are reported in `skipped`.
    pub fn estimate(&self, cycles: &[ChargeCycle]) -> Result<EstimateOutput> {
        let (observations, skipped) = observe_cycles(cycles, &self.config.protocol);
        Ok(EstimateOutput {
            estimates: self.estimate_observations(&observations)?,
            skipped,
        })
    }

    pub fn estimate_path(&self, path: &Path) -> Result<EstimateOutput> {
        let (observations, skipped) = observe_path(path, &self.config.protocol)?;
        Ok(EstimateOutput {
            estimates: self.estimate_observations(&observations)?,
            skipped,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("estimator serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| EstimatorError::Malformed(e.to_string()))?;
        let found = match value.get("schema_version") {
            None => "none".to_string(),
            Some(v) if v.as_u64() == Some(SCHEMA_VERSION as u64) => String::new(),
            Some(v) => v.to_string(),
        };
        if !found.is_empty() {
            return Err(EstimatorError::SchemaVersionMismatch {
                expected: SCHEMA_VERSION,
                found,
            });
        }
        if value.pointer("/model/coefficients").is_none() {
            return Err(EstimatorError::SchemaVersionMismatch {
                expected: SCHEMA_VERSION,
                found: format!("{SCHEMA_VERSION} without model.coefficients"),
            });
        }
        let estimator: Self = serde_json::from_value(value).map_err(|e| EstimatorError::Malformed(e.to_string()))?;
        if estimator.model.feature_names != estimator.report.selected {
            return Err(EstimatorError::Malformed(
                "model features differ from the correlation gate selection".into(),
            ));
        }
        estimator.feature_indices()?;
        Ok(estimator)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.to_json();
        text.push('\n');
        std::fs::write(path, text).map_err(|e| EstimatorError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| EstimatorError::io(path, e))?;
        Self::from_json(&text)
    }
}

pub fn write_estimates<W: Write>(writer: W, estimates: &[SohEstimate]) -> csv::Result<()> {
    let mut wtr = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(writer);
    wtr.write_record(ESTIMATE_CSV_HEADER)?;
    for e in estimates {
        wtr.write_record([e.cell_id.clone(), e.cycle_index.to_string(), e.soh_est_pct.to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_estimates_file(path: &Path, estimates: &[SohEstimate]) -> Result<()> {
    let file = File::create(path).map_err(|e| EstimatorError::io(path, e))?;
    write_estimates(BufWriter::new(file), estimates).map_err(|e| EstimatorError::io(path, e.into()))
}

/// Scores estimates against simulator ground truth. Estimates without a
/// truth record are an error.
pub fn score_against_truth(estimates: &[SohEstimate], truth: &GroundTruth) -> Result<MetricReport> {
    let mut predicted = Vec::with_capacity(estimates.len());
    let mut actual = Vec::with_capacity(estimates.len());
    for e in estimates {
        let record = truth.get(&e.cell_id, e.cycle_index).ok_or_else(|| {
            EstimatorError::InsufficientData(format!("no ground truth for {} cycle {}", e.cell_id, e.cycle_index))
        })?;
        predicted.push(e.soh_est_pct);
        actual.push(record.true_soh_pct);
    }
    Ok(metrics(&predicted, &actual)?)
}

/// Gate-selected training rows and held-out rows, labelled from their own
/// coulomb-counted capacities.
#[derive(Debug, Clone, PartialEq)]
pub struct HoldoutSplit {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub report: CorrelationReport,
}

pub fn holdout_split(observations: &[CycleObservation], config: &PipelineConfig) -> Result<HoldoutSplit> {
    config.validate()?;
    if config.holdout.is_empty() {
        return Err(EstimatorError::InvalidConfig("a holdout cell list is required".into()));
    }
    let (train, _) = labeled_dataset(observations, config, |c| !config.is_holdout(c))?;
    let report = correlation_gate(&train, config.correlation_gate)?;
    if report.selected.is_empty() {
        return Err(EstimatorError::NoFeaturesSelected {
            gate: config.correlation_gate,
        });
    }
    let (test, _) = labeled_dataset(observations, config, |c| config.is_holdout(c))?;
    Ok(HoldoutSplit {
        train: train.select(&report.selected)?,
        test: test.select(&report.selected)?,
        report,
    })
}

/// Replaces each row's label with the simulator's true SOH.
pub fn with_true_labels(dataset: &LabeledDataset, truth: &GroundTruth) -> Result<LabeledDataset> {
    let labels = dataset
        .provenance
        .iter()
        .map(|r| {
            truth
                .get(&r.cell_id, r.cycle_index)
                .map(|t| t.true_soh_pct)
                .ok_or_else(|| {
                    EstimatorError::InsufficientData(format!(
                        "no ground truth for {} cycle {}",
                        r.cell_id, r.cycle_index
                    ))
                })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LabeledDataset::new(
        dataset.features.clone(),
        labels,
        dataset.feature_names.clone(),
        dataset.provenance.clone(),
    )?)
}

/// Fits each method on `split.train` and scores it on `split.test`.
pub fn compare_methods(split: &HoldoutSplit, methods: &[Method]) -> Result<Vec<(String, MetricReport)>> {
    let rows: Vec<Vec<f64>> = (0..split.test.len())
        .map(|i| split.test.features.row(i).iter().copied().collect())
        .collect();
    methods
        .iter()
        .map(|m| {
            let fitted = m.fit(&split.train)?;
            let predicted = rows
                .iter()
                .map(|x| fitted.predict_one(x))
                .collect::<Result<Vec<_>, _>>()?;
            Ok((m.name().to_string(), metrics(&predicted, &split.test.labels)?))
        })
        .collect()
}
