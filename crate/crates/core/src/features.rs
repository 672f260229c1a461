//! Statistical and physical features of a CV current decay, and the
//! correlation gate that decides which of them enter the SOH model.

use std::io::Write;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{coulomb_count_samples, CvSegment, IngestError};
use crate::sindy::LabeledDataset;

/// Feature names in state-vector order.
pub const FEATURE_NAMES: [&str; 7] = ["mu", "sigma", "skew", "kur", "delta_i", "c_cv", "t_dur"];

pub const DEFAULT_GATE: f64 = 0.8;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("series too short: {0} values (need at least 3)")]
    TooShort(usize),
    #[error("series has zero variance")]
    ZeroVariance,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("SOH labels are constant; correlation is undefined")]
    ConstantLabel,
    #[error("correlation gate must lie in [0, 1], got {0}")]
    InvalidGate(f64),
    #[error(transparent)]
    Ingest(#[from] IngestError),
}

pub type Result<T, E = FeatureError> = std::result::Result<T, E>;

/// The seven-element feature state of one CV segment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub mu: f64,
    pub sigma: f64,
    pub skew: f64,
    pub kur: f64,
    pub delta_i: f64,
    pub c_cv: f64,
    pub t_dur: f64,
}

impl FeatureVector {
    pub fn to_array(&self) -> [f64; 7] {
        [
            self.mu,
            self.sigma,
            self.skew,
            self.kur,
            self.delta_i,
            self.c_cv,
            self.t_dur,
        ]
    }

    pub fn from_array(a: [f64; 7]) -> Self {
        Self {
            mu: a[0],
            sigma: a[1],
            skew: a[2],
            kur: a[3],
            delta_i: a[4],
            c_cv: a[5],
            t_dur: a[6],
        }
    }
}

/// Mean and (n-1)-divisor standard deviation.
pub fn sample_stats(series: &[f64]) -> Result<(f64, f64)> {
    let n = series.len();
    if n < 3 {
        return Err(FeatureError::TooShort(n));
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let ss: f64 = series.iter().map(|x| (x - mean).powi(2)).sum();
    Ok((mean, (ss / (n - 1) as f64).sqrt()))
}

fn standardized(series: &[f64]) -> Result<impl Iterator<Item = f64> + '_> {
    let (mean, sd) = sample_stats(series)?;
    let scale = series.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if !(sd > 1e-14 * scale) {
        return Err(FeatureError::ZeroVariance);
    }
    Ok(series.iter().map(move |x| (x - mean) / sd))
}

/// `1/(n-1) * sum(((x - mu) / sigma)^3)`.
pub fn skewness(series: &[f64]) -> Result<f64> {
    let n = series.len() as f64;
    Ok(standardized(series)?.map(|z| z * z * z).sum::<f64>() / (n - 1.0))
}

/// `n/((n-1)(n-2)) * sum(((x - mu) / sigma)^4) - 3`.
pub fn kurtosis(series: &[f64]) -> Result<f64> {
    let n = series.len() as f64;
    let s4: f64 = standardized(series)?.map(|z| (z * z) * (z * z)).sum();
    Ok(n / ((n - 1.0) * (n - 2.0)) * s4 - 3.0)
}

pub fn extract_features(segment: &CvSegment) -> Result<FeatureVector> {
    let currents = segment.currents();
    let (mu, sigma) = sample_stats(&currents)?;
    let skew = skewness(&currents)?;
    let kur = kurtosis(&currents)?;
    let delta_i = currents[0] - currents[currents.len() - 1];
    let c_cv = coulomb_count_samples(&segment.samples)?;
    Ok(FeatureVector {
        mu,
        sigma,
        skew,
        kur,
        delta_i,
        c_cv,
        t_dur: segment.duration_s(),
    })
}

/// Pearson product-moment correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(FeatureError::LengthMismatch(x.len(), y.len()));
    }
    let zx: Vec<f64> = standardized(x)?.collect();
    let zy = standardized(y)?;
    let r = zx.iter().zip(zy).map(|(a, b)| a * b).sum::<f64>() / (x.len() - 1) as f64;
    Ok(r.clamp(-1.0, 1.0))
}

/// Per-feature correlation with SOH and the features that pass the gate.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub gate: f64,
    /// `None` marks a constant feature, for which correlation is undefined.
    pub rho: IndexMap<String, Option<f64>>,
    pub selected: Vec<String>,
}

impl CorrelationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Ranks every dataset column against the labels and keeps those with
/// `|rho| >= gate`. Constant columns are reported as `None` and never
/// selected.
pub fn correlation_gate(dataset: &LabeledDataset, gate: f64) -> Result<CorrelationReport> {
    if !(0.0..=1.0).contains(&gate) {
        return Err(FeatureError::InvalidGate(gate));
    }
    let labels = &dataset.labels;
    if labels.len() < 3 {
        return Err(FeatureError::TooShort(labels.len()));
    }
    if matches!(standardized(labels), Err(FeatureError::ZeroVariance)) {
        return Err(FeatureError::ConstantLabel);
    }
    let mut rho = IndexMap::new();
    let mut selected = Vec::new();
    for (j, name) in dataset.feature_names.iter().enumerate() {
        let column: Vec<f64> = dataset.features.column(j).iter().copied().collect();
        let r = match pearson(&column, labels) {
            Ok(r) => Some(r),
            Err(FeatureError::ZeroVariance) => None,
            Err(e) => return Err(e),
        };
        if r.is_some_and(|r| r.abs() >= gate) {
            selected.push(name.clone());
        }
        rho.insert(name.clone(), r);
    }
    Ok(CorrelationReport { gate, rho, selected })
}

/// Writes the feature-matrix CSV. The dataset must carry all seven
/// features in state-vector order.
pub fn write_feature_matrix<W: Write>(writer: W, dataset: &LabeledDataset) -> csv::Result<()> {
    let mut wtr = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(writer);
    let mut header = vec!["cell_id", "cycle_index"];
    header.extend(FEATURE_NAMES);
    header.push("soh_pct");
    wtr.write_record(&header)?;
    for (i, source) in dataset.provenance.iter().enumerate() {
        let mut record = vec![source.cell_id.clone(), source.cycle_index.to_string()];
        record.extend(dataset.features.row(i).iter().map(|v| v.to_string()));
        record.push(dataset.labels[i].to_string());
        wtr.write_record(&record)?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::Sample;
    use crate::sindy::RowSource;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;

    fn skew_oracle(x: &[f64]) -> f64 {
        let n = x.len() as f64;
        let mut mean = 0.0;
        for v in x {
            mean += v;
        }
        mean /= n;
        let mut var = 0.0;
        for v in x {
            var += (v - mean) * (v - mean);
        }
        let sd = (var / (n - 1.0)).sqrt();
        let mut acc = 0.0;
        for v in x {
            let z = (v - mean) / sd;
            acc += z * z * z;
        }
        acc / (n - 1.0)
    }

    #[test]
    fn stats_examples() {
        assert_eq!(sample_stats(&[-1.0, 0.0, 1.0]).unwrap(), (0.0, 1.0));
        assert_eq!(sample_stats(&[5.0, 5.0, 5.0]).unwrap(), (5.0, 0.0));
        let (m, s) = sample_stats(&[1.0, 2.0, 3.0, 4.0, 10.0]).unwrap();
        assert_relative_eq!(m, 4.0);
        assert_relative_eq!(s, 12.5f64.sqrt(), max_relative = 1e-15);
        assert!(matches!(sample_stats(&[1.0, 2.0]), Err(FeatureError::TooShort(2))));
    }

    #[test]
    fn moment_examples() {
        assert_eq!(skewness(&[-2.0, 0.0, 2.0]).unwrap(), 0.0);
        // [0,0,0,10]: mu 2.5, sigma 5, z = (-0.5,-0.5,-0.5,1.5)
        assert_relative_eq!(skewness(&[0.0, 0.0, 0.0, 10.0]).unwrap(), 1.0, max_relative = 1e-14);
        assert_relative_eq!(kurtosis(&[0.0, 0.0, 0.0, 10.0]).unwrap(), 0.5, max_relative = 1e-14);
        assert_relative_eq!(
            skewness(&[0.0, 0.0, 0.0, 10.0]).unwrap(),
            skew_oracle(&[0.0, 0.0, 0.0, 10.0]),
            max_relative = 1e-14
        );
        assert!(matches!(skewness(&[3.0; 5]), Err(FeatureError::ZeroVariance)));
        assert!(matches!(kurtosis(&[0.1; 7]), Err(FeatureError::ZeroVariance)));
    }

    #[test]
    fn normal_sample_has_near_zero_excess_kurtosis() {
        let mut normals = crate::simulate::NormalStream::new(2024);
        let xs: Vec<f64> = (0..100_000).map(|_| normals.next_standard()).collect();
        let k = kurtosis(&xs).unwrap();
        assert!(k.abs() < 0.1, "excess kurtosis {k}");
    }

    #[test]
    fn pearson_examples() {
        let x: Vec<f64> = (1..=10).map(f64::from).collect();
        let y: Vec<f64> = x.iter().map(|v| 3.0 * v + 1.0).collect();
        assert_relative_eq!(pearson(&x, &y).unwrap(), 1.0, max_relative = 1e-14);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert_relative_eq!(pearson(&x, &neg).unwrap(), -1.0, max_relative = 1e-14);
        // cov sum 5.5, sum dx^2 5, sum dy^2 8.75
        let r = pearson(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 5.0]).unwrap();
        assert_relative_eq!(r, 5.5 / (5.0f64 * 8.75).sqrt(), max_relative = 1e-14);
        assert!(matches!(pearson(&x, &x[..5]), Err(FeatureError::LengthMismatch(10, 5))));
        assert!(matches!(pearson(&x, &[1.0; 10]), Err(FeatureError::ZeroVariance)));
    }

    fn exp_segment(i0: f64, tau: f64, n: usize, dt: f64) -> CvSegment {
        CvSegment {
            parent_cycle: 0,
            start_time_s: 0.0,
            samples: (0..n)
                .map(|k| {
                    let t = k as f64 * dt;
                    Sample::new(t, 4.2, i0 * (-t / tau).exp())
                })
                .collect(),
        }
    }

    #[test]
    fn exponential_segment_features() {
        let (i0, tau, n) = (1.1, 300.0, 901);
        let f = extract_features(&exp_segment(i0, tau, n, 1.0)).unwrap();
        let t_end = 900.0;
        assert_eq!(f.t_dur, t_end);
        assert_relative_eq!(f.delta_i, i0 * (1.0 - (-t_end / tau).exp()), max_relative = 1e-12);
        let analytic = i0 * tau * (1.0 - (-t_end / tau).exp()) / 3600.0;
        assert_relative_eq!(f.c_cv, analytic, max_relative = 1e-5);
        assert!(f.c_cv <= i0 * f.t_dur / 3600.0);
    }

    #[test]
    fn feature_scaling() {
        let seg = exp_segment(1.0, 200.0, 400, 1.0);
        let mut doubled = seg.clone();
        doubled.samples.iter_mut().for_each(|s| s.current_a *= 2.0);
        let a = extract_features(&seg).unwrap();
        let b = extract_features(&doubled).unwrap();
        for (x, y) in [
            (a.mu, b.mu),
            (a.sigma, b.sigma),
            (a.delta_i, b.delta_i),
            (a.c_cv, b.c_cv),
        ] {
            assert_relative_eq!(2.0 * x, y, max_relative = 1e-12);
        }
        assert_relative_eq!(a.skew, b.skew, max_relative = 1e-10);
        assert_relative_eq!(a.kur, b.kur, max_relative = 1e-10);
        assert_eq!(a.t_dur, b.t_dur);
        assert_eq!(extract_features(&seg).unwrap(), a);
    }

    #[test]
    fn too_short_segment() {
        let seg = exp_segment(1.0, 10.0, 2, 1.0);
        assert!(matches!(extract_features(&seg), Err(FeatureError::TooShort(2))));
    }

    fn dataset(columns: Vec<Vec<f64>>, labels: Vec<f64>) -> LabeledDataset {
        let p = labels.len();
        let names = FEATURE_NAMES[..columns.len()].iter().map(|s| s.to_string()).collect();
        let features = DMatrix::from_fn(p, columns.len(), |i, j| columns[j][i]);
        let provenance = (0..p)
            .map(|i| RowSource {
                cell_id: "c".into(),
                cycle_index: i as u32,
            })
            .collect();
        LabeledDataset::new(features, labels, names, provenance).unwrap()
    }

    #[test]
    fn gate_selects_affine_features() {
        let soh: Vec<f64> = (0..40).map(|k| 100.0 - 0.3 * k as f64).collect();
        let cols = (0..7)
            .map(|j| soh.iter().map(|s| (j as f64 - 3.0) * s + 1.0).collect())
            .collect::<Vec<Vec<f64>>>();
        // j = 3 produces a constant column, which is excluded
        let report = correlation_gate(&dataset(cols, soh.clone()), 0.8).unwrap();
        assert_eq!(report.selected, vec!["mu", "sigma", "skew", "delta_i", "c_cv", "t_dur"]);
        assert_eq!(report.rho["kur"], None);

        let cols = (0..7)
            .map(|j| soh.iter().map(|s| (j as f64 + 1.0) * s).collect())
            .collect::<Vec<Vec<f64>>>();
        let report = correlation_gate(&dataset(cols, soh), 0.8).unwrap();
        assert_eq!(report.selected.len(), 7);
        assert!(report.rho.values().all(|r| (r.unwrap() - 1.0).abs() < 1e-12));
    }

    #[test]
    fn gate_rejects_noise_feature() {
        let mut normals = crate::simulate::NormalStream::new(11);
        let soh: Vec<f64> = (0..200).map(|k| 100.0 - 0.1 * k as f64).collect();
        let noise: Vec<f64> = (0..200).map(|_| normals.next_standard()).collect();
        let direct = pearson(&noise, &soh).unwrap();
        assert!(direct.abs() < 0.8);
        let report = correlation_gate(&dataset(vec![soh.clone(), noise], soh.clone()), 0.8).unwrap();
        assert_eq!(report.selected, vec!["mu"]);

        let report = correlation_gate(&dataset(vec![soh.clone(), vec![1.0; 200]], soh), 0.0).unwrap();
        assert_eq!(report.selected, vec!["mu"]);
    }

    #[test]
    fn gate_errors() {
        let labels = vec![90.0; 10];
        let col: Vec<f64> = (0..10).map(f64::from).collect();
        assert!(matches!(
            correlation_gate(&dataset(vec![col.clone()], labels), 0.8),
            Err(FeatureError::ConstantLabel)
        ));
        let labels: Vec<f64> = col.iter().map(|v| v * 2.0).collect();
        assert!(matches!(
            correlation_gate(&dataset(vec![col], labels), 1.5),
            Err(FeatureError::InvalidGate(_))
        ));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn series() -> impl Strategy<Value = Vec<f64>> {
            prop::collection::vec(-5.0f64..5.0, 4..60).prop_filter("non-constant", |v| {
                sample_stats(v).map(|(_, s)| s > 1e-3).unwrap_or(false)
            })
        }

        proptest! {
            #[test]
            fn pearson_affine_invariance(
                pairs in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 4..60),
                a in prop_oneof![-4.0f64..-0.1, 0.1f64..4.0],
                b in -10.0f64..10.0,
            ) {
                let (x, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
                prop_assume!(sample_stats(&x).unwrap().1 > 1e-3 && sample_stats(&y).unwrap().1 > 1e-3);
                let r = pearson(&x, &y).unwrap();
                let ax: Vec<f64> = x.iter().map(|v| a * v + b).collect();
                let r2 = pearson(&ax, &y).unwrap();
                prop_assert!((r2 - a.signum() * r).abs() <= 1e-12);
                prop_assert!((-1.0..=1.0).contains(&r));
            }

            #[test]
            fn moments_translation_and_scale_invariant(x in series(), shift in -100.0f64..100.0, c in 0.01f64..100.0) {
                let (s, k) = (skewness(&x).unwrap(), kurtosis(&x).unwrap());
                let shifted: Vec<f64> = x.iter().map(|v| v + shift).collect();
                let scaled: Vec<f64> = x.iter().map(|v| v * c).collect();
                prop_assert!((skewness(&shifted).unwrap() - s).abs() <= 1e-10 * s.abs().max(1.0));
                prop_assert!((kurtosis(&shifted).unwrap() - k).abs() <= 1e-10 * k.abs().max(1.0));
                prop_assert!((skewness(&scaled).unwrap() - s).abs() <= 1e-10 * s.abs().max(1.0));
                prop_assert!((kurtosis(&scaled).unwrap() - k).abs() <= 1e-10 * k.abs().max(1.0));
            }
        }
    }
}
