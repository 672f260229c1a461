//! Charge-log ingestion.
//!
//! Reads CC-CV charge logs, separates the constant-current and
//! constant-voltage phases, integrates current into charge capacity and
//! converts smoothed capacity into state of health.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Header of the charge-log CSV.
pub const CYCLE_CSV_HEADER: [&str; 5] = ["cell_id", "cycle_index", "time_s", "voltage_V", "current_A"];

/// Header of the capacity-label CSV.
pub const LABEL_CSV_HEADER: [&str; 5] = [
    "cell_id",
    "cycle_index",
    "capacity_Ah",
    "smoothed_capacity_Ah",
    "soh_pct",
];

const SECONDS_PER_HOUR: f64 = 3600.0;
const MAX_VOLTAGE_V: f64 = 6.0;
const MAX_CURRENT_A: f64 = 10.0;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}: file contains no data rows")]
    EmptyFile(String),
    #[error("{source_name}: unexpected header {found:?}, expected {expected:?}")]
    BadHeader {
        source_name: String,
        found: Vec<String>,
        expected: Vec<String>,
    },
    #[error("{source_name} line {line}: {reason}")]
    MalformedRow {
        source_name: String,
        line: u64,
        reason: String,
    },
    #[error("{source_name} line {line}: time regresses within cell {cell_id} cycle {cycle_index}")]
    NonMonotonicTime {
        source_name: String,
        line: u64,
        cell_id: String,
        cycle_index: u32,
    },
    #[error("invalid charge cycle: {0}")]
    InvalidCycle(String),
    #[error("invalid protocol configuration: {0}")]
    InvalidConfig(String),
    #[error("cycle {cycle_index}: voltage never reaches the CV set-point")]
    NoCvPhase { cycle_index: u32 },
    #[error("cycle {cycle_index}: CV segment has only {len} samples (need at least 3)")]
    DegenerateCv { cycle_index: u32, len: usize },
    #[error("coulomb counting needs at least 2 samples, got {0}")]
    InsufficientSamples(usize),
    #[error("coulomb counting requires strictly increasing time (sample {0})")]
    UnorderedTime(usize),
    #[error("coulomb counting requires non-negative current (sample {0})")]
    NegativeCurrent(usize),
    #[error("invalid Gaussian kernel: sigma={sigma}, radius={radius}")]
    InvalidKernel { sigma: f64, radius: usize },
    #[error("cannot smooth an empty sequence")]
    EmptySequence,
    #[error("nominal capacity must be positive, got {0}")]
    NonPositiveNominal(f64),
    #[error("capacity must be non-negative, got {0}")]
    NegativeCapacity(f64),
    #[error("discharged charge {discharged} exceeds chargeable capacity {chargeable}")]
    InvalidDischarge { chargeable: f64, discharged: f64 },
    #[error("cell {cell_id} cycle {cycle_index}: capacity {capacity_ah} Ah outside (0, {limit_ah}] Ah")]
    CapacityOutOfRange {
        cell_id: String,
        cycle_index: u32,
        capacity_ah: f64,
        limit_ah: f64,
    },
}

pub type Result<T, E = IngestError> = std::result::Result<T, E>;

/// Charging protocol constants and phase-detection tolerances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolConfig {
    pub nominal_capacity_ah: f64,
    pub nominal_voltage_v: f64,
    pub cv_setpoint_v: f64,
    pub cc_current_a: f64,
    pub cv_cutoff_a: f64,
    /// Voltage band below the set-point still counted as CV.
    pub cc_voltage_tolerance_v: f64,
    /// Current drop below the CC level that marks the start of CV decay.
    pub cv_current_tolerance_a: f64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            nominal_capacity_ah: 2.0,
            nominal_voltage_v: 3.7,
            cv_setpoint_v: 4.2,
            cc_current_a: 1.25,
            cv_cutoff_a: 0.125,
            cc_voltage_tolerance_v: 0.01,
            cv_current_tolerance_a: 0.05,
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("nominal_capacity_ah", self.nominal_capacity_ah),
            ("nominal_voltage_v", self.nominal_voltage_v),
            ("cv_setpoint_v", self.cv_setpoint_v),
            ("cc_current_a", self.cc_current_a),
            ("cv_cutoff_a", self.cv_cutoff_a),
            ("cc_voltage_tolerance_v", self.cc_voltage_tolerance_v),
            ("cv_current_tolerance_a", self.cv_current_tolerance_a),
        ];
        for (name, value) in fields {
            if !(value.is_finite() && value > 0.0) {
                return Err(IngestError::InvalidConfig(format!(
                    "{name} must be positive, got {value}"
                )));
            }
        }
        if self.cv_cutoff_a >= self.cc_current_a {
            return Err(IngestError::InvalidConfig(format!(
                "cv_cutoff_a ({}) must be below cc_current_a ({})",
                self.cv_cutoff_a, self.cc_current_a
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub time_s: f64,
    pub voltage_v: f64,
    pub current_a: f64,
}

impl Sample {
    pub fn new(time_s: f64, voltage_v: f64, current_a: f64) -> Self {
        Self {
            time_s,
            voltage_v,
            current_a,
        }
    }
}

/// One charge event of one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChargeCycle {
    pub cell_id: String,
    pub cycle_index: u32,
    pub samples: Vec<Sample>,
}

impl ChargeCycle {
    /// Builds a cycle, checking time ordering and the sanity bounds on
    /// voltage and current.
    pub fn new(cell_id: impl Into<String>, cycle_index: u32, samples: Vec<Sample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(IngestError::InvalidCycle("no samples".into()));
        }
        for (i, s) in samples.iter().enumerate() {
            if let Some(reason) = sample_bounds_violation(s) {
                return Err(IngestError::InvalidCycle(format!("sample {i}: {reason}")));
            }
        }
        if let Some(i) = samples.windows(2).position(|w| w[1].time_s <= w[0].time_s) {
            return Err(IngestError::InvalidCycle(format!(
                "time not strictly increasing at sample {}",
                i + 1
            )));
        }
        Ok(Self {
            cell_id: cell_id.into(),
            cycle_index,
            samples,
        })
    }
}

/// Constant-voltage part of a charge with time re-zeroed at its first sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvSegment {
    pub parent_cycle: u32,
    /// Absolute time of the first CV sample in the parent cycle.
    pub start_time_s: f64,
    pub samples: Vec<Sample>,
}

impl CvSegment {
    pub fn currents(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.current_a).collect()
    }

    pub fn duration_s(&self) -> f64 {
        match (self.samples.first(), self.samples.last()) {
            (Some(a), Some(b)) => b.time_s - a.time_s,
            _ => 0.0,
        }
    }

    /// Samples with the parent cycle's absolute time restored.
    pub fn absolute_samples(&self) -> impl Iterator<Item = Sample> + '_ {
        self.samples.iter().map(|s| Sample {
            time_s: s.time_s + self.start_time_s,
            ..*s
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityLabel {
    pub cell_id: String,
    pub cycle_index: u32,
    pub capacity_ah: f64,
    pub smoothed_capacity_ah: f64,
    pub soh_pct: f64,
}

fn sample_bounds_violation(s: &Sample) -> Option<String> {
    if !(s.time_s.is_finite() && s.voltage_v.is_finite() && s.current_a.is_finite()) {
        return Some("non-finite value".into());
    }
    if !(s.voltage_v > 0.0 && s.voltage_v < MAX_VOLTAGE_V) {
        return Some(format!("voltage {} V outside (0, {MAX_VOLTAGE_V}) V", s.voltage_v));
    }
    if !(0.0..=MAX_CURRENT_A).contains(&s.current_a) {
        return Some(format!("current {} A outside [0, {MAX_CURRENT_A}] A", s.current_a));
    }
    None
}

/// Parses a charge-log CSV file into one cycle per `(cell_id, cycle_index)`.
///
/// Rows of different cycles may interleave, but within one cycle the time
/// column must strictly increase in file order. Cycles are returned sorted
/// by cell id, then cycle index.
pub fn parse_cycles(path: impl AsRef<Path>) -> Result<Vec<ChargeCycle>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_cycles_from_reader(file, &path.display().to_string())
}

pub fn parse_cycles_from_reader<R: Read>(reader: R, source_name: &str) -> Result<Vec<ChargeCycle>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let malformed = |line: u64, reason: String| IngestError::MalformedRow {
        source_name: source_name.to_string(),
        line,
        reason,
    };

    let mut records = rdr.records();
    let header = match records.next() {
        None => return Err(IngestError::EmptyFile(source_name.to_string())),
        Some(rec) => rec.map_err(|e| malformed(1, e.to_string()))?,
    };
    let found: Vec<String> = header
        .iter()
        .map(|h| h.trim().trim_start_matches('\u{feff}').to_string())
        .collect();
    if found != CYCLE_CSV_HEADER {
        return Err(IngestError::BadHeader {
            source_name: source_name.to_string(),
            found,
            expected: CYCLE_CSV_HEADER.iter().map(|s| s.to_string()).collect(),
        });
    }

    let mut groups: BTreeMap<(String, u32), Vec<Sample>> = BTreeMap::new();
    for rec in records {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            malformed(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() == 1 && rec[0].trim().is_empty() {
            continue;
        }
        if rec.len() != CYCLE_CSV_HEADER.len() {
            return Err(malformed(
                line,
                format!("expected {} fields, found {}", CYCLE_CSV_HEADER.len(), rec.len()),
            ));
        }
        let cell_id = rec[0].trim();
        if cell_id.is_empty() {
            return Err(malformed(line, "empty cell_id".into()));
        }
        let cycle_index: u32 = rec[1]
            .trim()
            .parse()
            .map_err(|_| malformed(line, format!("cycle_index {:?} is not a non-negative integer", &rec[1])))?;
        let mut values = [0.0; 3];
        for (slot, (field, name)) in
            values
                .iter_mut()
                .zip([(&rec[2], "time_s"), (&rec[3], "voltage_V"), (&rec[4], "current_A")])
        {
            *slot = field
                .trim()
                .parse::<f64>()
                .map_err(|_| malformed(line, format!("{name} {field:?} is not a number")))?;
        }
        let sample = Sample::new(values[0], values[1], values[2]);
        if let Some(reason) = sample_bounds_violation(&sample) {
            return Err(malformed(line, reason));
        }
        let samples = groups.entry((cell_id.to_string(), cycle_index)).or_default();
        if let Some(prev) = samples.last() {
            if sample.time_s <= prev.time_s {
                return Err(IngestError::NonMonotonicTime {
                    source_name: source_name.to_string(),
                    line,
                    cell_id: cell_id.to_string(),
                    cycle_index,
                });
            }
        }
        samples.push(sample);
    }

    if groups.is_empty() {
        return Err(IngestError::EmptyFile(source_name.to_string()));
    }
    Ok(groups
        .into_iter()
        .map(|((cell_id, cycle_index), samples)| ChargeCycle {
            cell_id,
            cycle_index,
            samples,
        })
        .collect())
}

/// Formats a value with at most `digits` significant digits, trimming
/// trailing zeros.
pub(crate) fn format_sig(value: f64, digits: usize) -> String {
    if value == 0.0 || !value.is_finite() {
        return format!("{value}");
    }
    let magnitude = value.abs().log10().floor() as i32;
    if !(-6..15).contains(&magnitude) {
        return format!("{:.*e}", digits.saturating_sub(1), value);
    }
    let decimals = (digits as i32 - 1 - magnitude).max(0) as usize;
    let mut s = format!("{value:.decimals$}");
    if s.contains('.') {
        let trimmed = s.trim_end_matches('0').trim_end_matches('.').len();
        s.truncate(trimmed);
    }
    if s == "-0" {
        s = "0".into();
    }
    s
}

/// Writes cycles in the charge-log CSV schema, values at 9 significant digits.
pub fn write_cycles<W: Write>(writer: W, cycles: &[ChargeCycle]) -> csv::Result<()> {
    let mut wtr = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(writer);
    wtr.write_record(CYCLE_CSV_HEADER)?;
    for cycle in cycles {
        let index = cycle.cycle_index.to_string();
        for s in &cycle.samples {
            wtr.write_record([
                cycle.cell_id.as_str(),
                index.as_str(),
                &format_sig(s.time_s, 9),
                &format_sig(s.voltage_v, 9),
                &format_sig(s.current_a, 9),
            ])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Splits a charge into its CC prefix and CV segment.
///
/// The CV segment starts at the first sample whose voltage is within the
/// voltage tolerance of the set-point and whose current has fallen more than
/// the current tolerance below the CC level.
pub fn split_cc_cv(cycle: &ChargeCycle, config: &ProtocolConfig) -> Result<(Vec<Sample>, CvSegment)> {
    let v_min = config.cv_setpoint_v - config.cc_voltage_tolerance_v;
    let i_max = config.cc_current_a - config.cv_current_tolerance_a;
    let start = cycle
        .samples
        .iter()
        .position(|s| s.voltage_v >= v_min && s.current_a < i_max)
        .ok_or(IngestError::NoCvPhase {
            cycle_index: cycle.cycle_index,
        })?;
    let cv = &cycle.samples[start..];
    if cv.len() < 3 {
        return Err(IngestError::DegenerateCv {
            cycle_index: cycle.cycle_index,
            len: cv.len(),
        });
    }
    let t0 = cv[0].time_s;
    let segment = CvSegment {
        parent_cycle: cycle.cycle_index,
        start_time_s: t0,
        samples: cv
            .iter()
            .map(|s| Sample {
                time_s: s.time_s - t0,
                ..*s
            })
            .collect(),
    };
    Ok((cycle.samples[..start].to_vec(), segment))
}

/// Trapezoidal integral of current over time, in ampere-hours.
pub fn coulomb_count<I>(points: I) -> Result<f64>
where
    I: IntoIterator<Item = (f64, f64)>,
{
    let mut iter = points.into_iter();
    let Some((mut t_prev, mut i_prev)) = iter.next() else {
        return Err(IngestError::InsufficientSamples(0));
    };
    if i_prev < 0.0 {
        return Err(IngestError::NegativeCurrent(0));
    }
    let mut count = 1;
    let mut ampere_seconds = 0.0;
    for (t, i) in iter {
        if !(t > t_prev) {
            return Err(IngestError::UnorderedTime(count));
        }
        if i < 0.0 {
            return Err(IngestError::NegativeCurrent(count));
        }
        ampere_seconds += 0.5 * (i + i_prev) * (t - t_prev);
        t_prev = t;
        i_prev = i;
        count += 1;
    }
    if count < 2 {
        return Err(IngestError::InsufficientSamples(count));
    }
    Ok(ampere_seconds / SECONDS_PER_HOUR)
}

pub fn coulomb_count_samples(samples: &[Sample]) -> Result<f64> {
    coulomb_count(samples.iter().map(|s| (s.time_s, s.current_a)))
}

/// Chargeable capacity of a split charge: CC integral plus CV integral.
///
/// The CC interval runs up to the first CV sample so the two integrals tile
/// the whole charge.
pub fn charge_capacity(cc: &[Sample], cv: &CvSegment) -> Result<f64> {
    let cv_abs: Vec<Sample> = cv.absolute_samples().collect();
    let cc_part = if cc.is_empty() {
        0.0
    } else {
        coulomb_count(cc.iter().chain(cv_abs.first()).map(|s| (s.time_s, s.current_a)))?
    };
    Ok(cc_part + coulomb_count_samples(&cv_abs)?)
}

/// Normalized discrete Gaussian weights for offsets `-radius..=radius`.
pub fn gaussian_kernel(sigma: f64, radius: usize) -> Result<Vec<f64>> {
    if !(sigma.is_finite() && sigma > 0.0) || radius < 1 {
        return Err(IngestError::InvalidKernel { sigma, radius });
    }
    let r = radius as i64;
    let raw: Vec<f64> = (-r..=r)
        .map(|j| (-((j * j) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / total).collect())
}

/// Gaussian smoothing with truncate-and-renormalize boundary handling.
pub fn gaussian_smooth(values: &[f64], sigma: f64, radius: usize) -> Result<Vec<f64>> {
    let kernel = gaussian_kernel(sigma, radius)?;
    if values.is_empty() {
        return Err(IngestError::EmptySequence);
    }
    let n = values.len() as i64;
    let r = radius as i64;
    let out = (0..n)
        .map(|i| {
            let lo = (i - r).max(0);
            let hi = (i + r).min(n - 1);
            let (mut acc, mut norm) = (0.0, 0.0);
            for k in lo..=hi {
                let w = kernel[(k - i + r) as usize];
                acc += w * values[k as usize];
                norm += w;
            }
            let v = acc / norm;
            // Rounding can push a weighted mean a hair outside the data range.
            let (min, max) = values[lo as usize..=hi as usize]
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
            v.clamp(min, max)
        })
        .collect();
    Ok(out)
}

/// State of health in percent of nominal capacity.
pub fn to_soh(capacity_ah: f64, nominal_capacity_ah: f64) -> Result<f64> {
    if !(nominal_capacity_ah > 0.0) {
        return Err(IngestError::NonPositiveNominal(nominal_capacity_ah));
    }
    if capacity_ah < 0.0 {
        return Err(IngestError::NegativeCapacity(capacity_ah));
    }
    Ok(capacity_ah / nominal_capacity_ah * 100.0)
}

/// State of charge in percent of the chargeable capacity.
pub fn to_soc(chargeable_ah: f64, discharged_ah: f64) -> Result<f64> {
    if !(chargeable_ah > 0.0) {
        return Err(IngestError::NonPositiveNominal(chargeable_ah));
    }
    if !(0.0..=chargeable_ah).contains(&discharged_ah) {
        return Err(IngestError::InvalidDischarge {
            chargeable: chargeable_ah,
            discharged: discharged_ah,
        });
    }
    Ok((chargeable_ah - discharged_ah) / chargeable_ah * 100.0)
}

/// Smoothing parameters for the per-cell capacity history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Smoothing {
    pub sigma: f64,
    pub radius: usize,
}

impl Default for Smoothing {
    fn default() -> Self {
        Self { sigma: 3.0, radius: 9 }
    }
}

/// Labels one cell's capacity history. `capacities` holds
/// `(cycle_index, capacity_Ah)` pairs and is ordered by cycle index
/// before smoothing.
pub fn label_capacities(
    cell_id: &str,
    capacities: &[(u32, f64)],
    smoothing: Smoothing,
    config: &ProtocolConfig,
) -> Result<Vec<CapacityLabel>> {
    let limit_ah = 1.2 * config.nominal_capacity_ah;
    let mut ordered = capacities.to_vec();
    ordered.sort_by_key(|&(index, _)| index);
    for &(cycle_index, capacity_ah) in &ordered {
        if !(capacity_ah > 0.0 && capacity_ah <= limit_ah) {
            return Err(IngestError::CapacityOutOfRange {
                cell_id: cell_id.to_string(),
                cycle_index,
                capacity_ah,
                limit_ah,
            });
        }
    }
    let raw: Vec<f64> = ordered.iter().map(|&(_, c)| c).collect();
    let smoothed = gaussian_smooth(&raw, smoothing.sigma, smoothing.radius)?;
    ordered
        .iter()
        .zip(smoothed)
        .map(|(&(cycle_index, capacity_ah), smoothed_capacity_ah)| {
            Ok(CapacityLabel {
                cell_id: cell_id.to_string(),
                cycle_index,
                capacity_ah,
                smoothed_capacity_ah,
                soh_pct: to_soh(smoothed_capacity_ah, config.nominal_capacity_ah)?,
            })
        })
        .collect()
}

pub fn write_labels<W: Write>(writer: W, labels: &[CapacityLabel]) -> csv::Result<()> {
    let mut wtr = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(writer);
    wtr.write_record(LABEL_CSV_HEADER)?;
    for l in labels {
        wtr.write_record([
            l.cell_id.clone(),
            l.cycle_index.to_string(),
            l.capacity_ah.to_string(),
            l.smoothed_capacity_ah.to_string(),
            l.soh_pct.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}
