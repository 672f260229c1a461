//! Deterministic synthetic CC-CV aging fleet.
//!
//! Each cell ages at its own speed. Per cycle `k` the true capacity fades
//! linearly with Gaussian noise, and cell resistance grows linearly, which
//! stretches the CV time constant and deepens the ohmic current step at CV
//! onset:
//!
//! ```text
//! C_k   = C_nom (1 - fade_rate a k) + N(0, fade_noise_sd% of C_nom)
//! r_k   = 1 + resistance_growth a k
//! tau_k = cv_tau0_s r_k
//! I0_k  = I_cc / (1 + ohmic_ratio r_k)
//! I(t)  = I0_k exp(-t / tau_k)            until I = cv_cutoff_a
//! ```
//!
//! `a` is the cell's aging speed, `1 + cell_spread N(0, 1)`. The CC phase
//! runs at `cc_current_a` with voltage affine in accumulated charge and is
//! sized so that the whole charge integrates to `C_k`.
//!
//! Randomness comes from [`NormalStream`]: ChaCha8 seeded through
//! `rand_chacha`'s `seed_from_u64`, 53-bit uniforms, Box-Muller pairs. Cell
//! `c` (0-based) uses seed `seed ^ c`.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::FEATURE_NAMES;
use crate::ingest::{format_sig, write_cycles, ChargeCycle, ProtocolConfig, Sample};
use crate::sindy::{LabeledDataset, RowSource, SindyError, Standardizer};

pub const GROUND_TRUTH_FILE: &str = "ground_truth.csv";
pub const GROUND_TRUTH_HEADER: [&str; 4] = ["cell_id", "cycle_index", "true_capacity_Ah", "true_soh_pct"];

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulator configuration: {0}")]
    InvalidConfig(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Standard normal variates from a seeded ChaCha8 stream.
#[derive(Debug, Clone)]
pub struct NormalStream {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl NormalStream {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    /// Uniform on (0, 1].
    fn next_open_unit(&mut self) -> f64 {
        1.0 - (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn next_standard(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = self.next_open_unit();
        let u2 = self.next_open_unit();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = std::f64::consts::TAU * u2;
        self.spare = Some(radius * angle.sin());
        radius * angle.cos()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub protocol: ProtocolConfig,
    pub num_cells: usize,
    pub cycles_per_cell: usize,
    /// Fraction of nominal capacity lost per cycle.
    pub fade_rate: f64,
    /// Standard deviation of capacity noise, in SOH percent.
    pub fade_noise_sd: f64,
    /// Relative resistance growth per cycle.
    pub resistance_growth: f64,
    /// CV time constant of a fresh cell, seconds.
    pub cv_tau0_s: f64,
    /// Ohmic-to-polarization resistance ratio of a fresh cell; sets the
    /// current step at CV onset.
    pub ohmic_ratio: f64,
    /// Relative spread of per-cell aging speed.
    pub cell_spread: f64,
    /// Open-circuit voltage of an empty cell at the start of CC.
    pub empty_voltage_v: f64,
    pub sample_dt_s: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            protocol: ProtocolConfig::default(),
            num_cells: 8,
            cycles_per_cell: 300,
            fade_rate: 8e-4,
            fade_noise_sd: 0.15,
            resistance_growth: 2e-3,
            cv_tau0_s: 600.0,
            ohmic_ratio: 0.1,
            cell_spread: 0.1,
            empty_voltage_v: 3.2,
            sample_dt_s: 1.0,
            seed: 7,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidConfig(m));
        self.protocol
            .validate()
            .map_err(|e| SimError::InvalidConfig(e.to_string()))?;
        if self.num_cells == 0 {
            return bad("num_cells must be >= 1".into());
        }
        if self.cycles_per_cell < 2 {
            return bad("cycles_per_cell must be >= 2".into());
        }
        for (name, v) in [
            ("fade_rate", self.fade_rate),
            ("fade_noise_sd", self.fade_noise_sd),
            ("resistance_growth", self.resistance_growth),
            ("ohmic_ratio", self.ohmic_ratio),
            ("cell_spread", self.cell_spread),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be >= 0, got {v}"));
            }
        }
        for (name, v) in [("sample_dt_s", self.sample_dt_s), ("cv_tau0_s", self.cv_tau0_s)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be > 0, got {v}"));
            }
        }
        if !(self.empty_voltage_v > 0.0 && self.empty_voltage_v < self.protocol.cv_setpoint_v) {
            return bad(format!(
                "empty_voltage_v must lie in (0, {}), got {}",
                self.protocol.cv_setpoint_v, self.empty_voltage_v
            ));
        }
        Ok(())
    }

    pub fn cell_id(&self, cell: usize) -> String {
        format!("cell{}", cell + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub cell_id: String,
    pub cycle_index: u32,
    pub true_capacity_ah: f64,
    pub true_soh_pct: f64,
    pub cv_tau_s: f64,
    pub cv_onset_current_a: f64,
    pub cv_duration_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub records: Vec<TruthRecord>,
}

impl GroundTruth {
    pub fn get(&self, cell_id: &str, cycle_index: u32) -> Option<&TruthRecord> {
        self.records
            .iter()
            .find(|r| r.cell_id == cell_id && r.cycle_index == cycle_index)
    }
}

/// Generates one cell's cycles and their ground truth.
pub fn simulate_cell(config: &SimConfig, cell: usize) -> Result<(Vec<ChargeCycle>, Vec<TruthRecord>), SimError> {
    config.validate()?;
    let p = &config.protocol;
    let dt = config.sample_dt_s;
    let cell_id = config.cell_id(cell);
    let mut normals = NormalStream::new(config.seed ^ cell as u64);
    let aging = (1.0 + config.cell_spread * normals.next_standard()).max(0.2);

    let mut cycles = Vec::with_capacity(config.cycles_per_cell);
    let mut truth = Vec::with_capacity(config.cycles_per_cell);
    for k in 0..config.cycles_per_cell {
        let age = aging * k as f64;
        let noise = normals.next_standard() * config.fade_noise_sd / 100.0 * p.nominal_capacity_ah;
        let capacity = (p.nominal_capacity_ah * (1.0 - config.fade_rate * age) + noise).min(p.nominal_capacity_ah);
        let resistance = 1.0 + config.resistance_growth * age;
        let tau = config.cv_tau0_s * resistance;
        let onset = p.cc_current_a / (1.0 + config.ohmic_ratio * resistance);
        if onset <= p.cv_cutoff_a {
            return Err(SimError::InvalidConfig(format!(
                "cell {cell_id} cycle {k}: CV onset current {onset} A at or below cutoff"
            )));
        }
        let cv_duration = tau * (onset / p.cv_cutoff_a).ln();
        let cv_charge = tau * (onset - p.cv_cutoff_a);
        let transition_charge = 0.5 * dt * (p.cc_current_a + onset);
        let cc_charge = capacity * 3600.0 - cv_charge - transition_charge;
        let cc_duration = cc_charge / p.cc_current_a;
        if !(cc_duration > dt) {
            return Err(SimError::InvalidConfig(format!(
                "cell {cell_id} cycle {k}: capacity {capacity} Ah too small for the CV phase"
            )));
        }

        let mut samples = Vec::with_capacity((cc_duration + cv_duration) as usize + 4);
        let voltage_slope = (p.cv_setpoint_v - config.empty_voltage_v) / cc_charge;
        let mut j = 0u64;
        loop {
            let t = j as f64 * dt;
            if t >= cc_duration {
                break;
            }
            samples.push(Sample::new(
                t,
                config.empty_voltage_v + voltage_slope * p.cc_current_a * t,
                p.cc_current_a,
            ));
            j += 1;
        }
        samples.push(Sample::new(cc_duration, p.cv_setpoint_v, p.cc_current_a));
        let cv_start = cc_duration + dt;
        let mut j = 0u64;
        loop {
            let s = j as f64 * dt;
            if s >= cv_duration {
                break;
            }
            samples.push(Sample::new(cv_start + s, p.cv_setpoint_v, onset * (-s / tau).exp()));
            j += 1;
        }
        samples.push(Sample::new(cv_start + cv_duration, p.cv_setpoint_v, p.cv_cutoff_a));

        cycles.push(ChargeCycle {
            cell_id: cell_id.clone(),
            cycle_index: k as u32,
            samples,
        });
        truth.push(TruthRecord {
            cell_id: cell_id.clone(),
            cycle_index: k as u32,
            true_capacity_ah: capacity,
            true_soh_pct: capacity / p.nominal_capacity_ah * 100.0,
            cv_tau_s: tau,
            cv_onset_current_a: onset,
            cv_duration_s: cv_duration,
        });
    }
    Ok((cycles, truth))
}

pub fn simulate_fleet(config: &SimConfig) -> Result<(Vec<ChargeCycle>, GroundTruth), SimError> {
    let mut cycles = Vec::new();
    let mut truth = GroundTruth::default();
    for cell in 0..config.num_cells {
        let (c, t) = simulate_cell(config, cell)?;
        cycles.extend(c);
        truth.records.extend(t);
    }
    Ok((cycles, truth))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SimError + '_ {
    move |source| SimError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(path: &Path, e: csv::Error) -> SimError {
    SimError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    }
}

/// Writes `<cell_id>.csv` for every cell present in `cycles`.
pub fn write_cell_files(cycles: &[ChargeCycle], dir: &Path) -> Result<Vec<PathBuf>, SimError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut written = Vec::new();
    let mut start = 0;
    while start < cycles.len() {
        let id = &cycles[start].cell_id;
        let end = start + cycles[start..].iter().take_while(|c| &c.cell_id == id).count();
        let path = dir.join(format!("{id}.csv"));
        let file = File::create(&path).map_err(io_err(&path))?;
        write_cycles(BufWriter::new(file), &cycles[start..end]).map_err(|e| csv_err(&path, e))?;
        written.push(path);
        start = end;
    }
    Ok(written)
}

pub fn write_ground_truth(truth: &[TruthRecord], path: &Path) -> Result<(), SimError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut wtr = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(BufWriter::new(file));
    let wrap = |e: csv::Error| csv_err(path, e);
    wtr.write_record(GROUND_TRUTH_HEADER).map_err(wrap)?;
    for r in truth {
        wtr.write_record([
            r.cell_id.clone(),
            r.cycle_index.to_string(),
            format_sig(r.true_capacity_ah, 12),
            format_sig(r.true_soh_pct, 12),
        ])
        .map_err(wrap)?;
    }
    wtr.flush().map_err(io_err(path))?;
    Ok(())
}

/// Cycle CSVs (one per cell) plus `ground_truth.csv` in `dir`.
pub fn export_fleet(cycles: &[ChargeCycle], truth: &GroundTruth, dir: &Path) -> Result<Vec<PathBuf>, SimError> {
    let mut written = write_cell_files(cycles, dir)?;
    let truth_path = dir.join(GROUND_TRUTH_FILE);
    write_ground_truth(&truth.records, &truth_path)?;
    written.push(truth_path);
    Ok(written)
}

/// Simulates and writes the fleet one cell at a time, so peak memory is a
/// single cell's samples. Output is identical to [`export_fleet`] on
/// [`simulate_fleet`].
pub fn simulate_to_dir(config: &SimConfig, dir: &Path) -> Result<Vec<PathBuf>, SimError> {
    let mut truth = GroundTruth::default();
    let mut written = Vec::new();
    for cell in 0..config.num_cells {
        let (cycles, t) = simulate_cell(config, cell)?;
        written.extend(write_cell_files(&cycles, dir)?);
        truth.records.extend(t);
    }
    let truth_path = dir.join(GROUND_TRUTH_FILE);
    write_ground_truth(&truth.records, &truth_path)?;
    written.push(truth_path);
    Ok(written)
}

/// Reads a `ground_truth.csv` back.
pub fn read_ground_truth(path: &Path) -> Result<GroundTruth, SimError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let bad = |m: String| SimError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::new(std::io::ErrorKind::InvalidData, m),
    };
    let headers = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    if headers.iter().collect::<Vec<_>>() != GROUND_TRUTH_HEADER {
        return Err(bad(format!("unexpected header {headers:?}")));
    }
    let mut records = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let parse = |i: usize| {
            rec[i]
                .parse::<f64>()
                .map_err(|_| bad(format!("row {}: bad number {:?}", line + 2, &rec[i])))
        };
        records.push(TruthRecord {
            cell_id: rec[0].to_string(),
            cycle_index: rec[1]
                .parse()
                .map_err(|_| bad(format!("row {}: bad cycle index", line + 2)))?,
            true_capacity_ah: parse(2)?,
            true_soh_pct: parse(3)?,
            cv_tau_s: f64::NAN,
            cv_onset_current_a: f64::NAN,
            cv_duration_s: f64::NAN,
        });
    }
    Ok(GroundTruth { records })
}

/// Labelled rows for regression benchmarks: seven normal features z-scored
/// over the sample (so the law holds in a fitted model's coordinates) and
/// `soh = 90 + 1.5 z1 + 0.3 z2^2 - z3^3 + N(0, noise_sd)`.
pub fn sparse_regression_rows(rows: usize, seed: u64, noise_sd: f64) -> Result<LabeledDataset, SindyError> {
    let mut g = NormalStream::new(seed);
    let mut features = DMatrix::from_fn(rows, 7, |_, _| g.next_standard());
    if rows >= 2 {
        let st = Standardizer::fit(&features);
        features = st.transform(&features);
    }
    let mut labels = Vec::with_capacity(rows);
    for i in 0..rows {
        let (z1, z2, z3) = (features[(i, 0)], features[(i, 1)], features[(i, 2)]);
        labels.push(90.0 + 1.5 * z1 + 0.3 * z2 * z2 - z3 * z3 * z3 + noise_sd * g.next_standard());
    }
    let names = FEATURE_NAMES.iter().map(|s| s.to_string()).collect();
    let provenance = (0..rows)
        .map(|i| RowSource {
            cell_id: "synthetic".into(),
            cycle_index: i as u32,
        })
        .collect();
    LabeledDataset::new(features, labels, names, provenance)
}
