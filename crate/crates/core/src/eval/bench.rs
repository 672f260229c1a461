use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::baselines::{fit_kernel_baseline, fit_ridge, KernelRegressor, RidgeModel};
use super::{EvalError, MetricReport, Result};
use crate::sindy::{fit_static, LabeledDataset, SparseModel, StlsParams};

/// A trained regressor as seen by the timing harness.
pub trait Fitted {
    fn predict_one(&self, x: &[f64]) -> Result<f64>;
    /// Nonzero parameters retained by the model.
    fn nnz(&self) -> usize;
    fn library_size(&self) -> usize;
}

impl Fitted for SparseModel {
    fn predict_one(&self, x: &[f64]) -> Result<f64> {
        Ok(SparseModel::predict_one(self, x)?)
    }
    fn nnz(&self) -> usize {
        SparseModel::nnz(self)
    }
    fn library_size(&self) -> usize {
        self.library.len()
    }
}

impl Fitted for RidgeModel {
    fn predict_one(&self, x: &[f64]) -> Result<f64> {
        RidgeModel::predict_one(self, x)
    }
    fn nnz(&self) -> usize {
        self.model.nnz()
    }
    fn library_size(&self) -> usize {
        self.model.library.len()
    }
}

impl Fitted for KernelRegressor {
    fn predict_one(&self, x: &[f64]) -> Result<f64> {
        KernelRegressor::predict_one(self, x)
    }
    fn nnz(&self) -> usize {
        self.weights.iter().filter(|w| **w != 0.0).count()
    }
    fn library_size(&self) -> usize {
        self.num_support()
    }
}

/// Regression methods compared by the harness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Method {
    Sindy { degree: u32, params: StlsParams },
    Ridge { degree: u32, alpha: f64 },
    Kernel { lengthscale: f64, noise_sd: f64 },
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Sindy { .. } => "SINDy",
            Method::Ridge { .. } => "Ridge",
            Method::Kernel { .. } => "Kernel",
        }
    }

    pub fn fit(&self, train: &LabeledDataset) -> Result<Box<dyn Fitted>> {
        Ok(match self {
            Method::Sindy { degree, params } => Box::new(fit_static(train, *degree, params, "")?),
            Method::Ridge { degree, alpha } => Box::new(fit_ridge(train, *degree, *alpha)?),
            Method::Kernel { lengthscale, noise_sd } => Box::new(fit_kernel_baseline(train, *lengthscale, *noise_sd)?),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub method_name: String,
    pub train_time_s: f64,
    pub test_time_per_sample_ms: f64,
    pub nnz: usize,
    pub library_size: usize,
    pub repetitions: usize,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn predict_rows(model: &dyn Fitted, rows: &[Vec<f64>]) -> Result<f64> {
    let mut sink = 0.0;
    for row in rows {
        sink += model.predict_one(row)?;
    }
    Ok(sink)
}

/// Median wall-clock training and per-sample prediction time over
/// `repetitions` runs after one discarded warm-up run.
pub fn bench(
    method: &Method,
    train: &LabeledDataset,
    test: &LabeledDataset,
    repetitions: usize,
) -> Result<TimingReport> {
    if repetitions < 3 {
        return Err(EvalError::InvalidParameter(format!(
            "repetitions must be >= 3, got {repetitions}"
        )));
    }
    if test.is_empty() {
        return Err(EvalError::Empty);
    }
    let rows: Vec<Vec<f64>> = (0..test.len())
        .map(|i| test.features.row(i).iter().copied().collect())
        .collect();

    let warm = method.fit(train)?;
    std::hint::black_box(predict_rows(warm.as_ref(), &rows)?);

    let mut train_times = Vec::with_capacity(repetitions);
    let mut test_times = Vec::with_capacity(repetitions);
    let mut last = warm;
    for _ in 0..repetitions {
        let start = Instant::now();
        let model = method.fit(train)?;
        train_times.push(start.elapsed().as_secs_f64());
        let start = Instant::now();
        std::hint::black_box(predict_rows(model.as_ref(), std::hint::black_box(&rows))?);
        test_times.push(start.elapsed().as_secs_f64());
        last = model;
    }
    Ok(TimingReport {
        method_name: method.name().to_string(),
        train_time_s: median(&mut train_times),
        test_time_per_sample_ms: median(&mut test_times) * 1e3 / rows.len() as f64,
        nnz: last.nnz(),
        library_size: last.library_size(),
        repetitions,
    })
}

fn render_table(header: &str, columns: &[String], rows: &[(&str, Vec<String>)]) -> String {
    let label_w = rows
        .iter()
        .map(|(l, _)| l.len())
        .chain([header.len()])
        .max()
        .unwrap_or(0);
    let widths: Vec<usize> = columns
        .iter()
        .enumerate()
        .map(|(j, c)| rows.iter().map(|(_, v)| v[j].len()).chain([c.len()]).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    let _ = write!(out, "{header:<label_w$}");
    for (c, w) in columns.iter().zip(&widths) {
        let _ = write!(out, "  {c:>w$}");
    }
    out.push('\n');
    for (label, values) in rows {
        let _ = write!(out, "{label:<label_w$}");
        for (v, w) in values.iter().zip(&widths) {
            let _ = write!(out, "  {v:>w$}");
        }
        out.push('\n');
    }
    out
}

/// Rows MAE, MAX, RMSE; one column per method.
pub fn render_metric_table(results: &[(String, MetricReport)]) -> String {
    let columns: Vec<String> = results.iter().map(|(n, _)| n.clone()).collect();
    let row = |f: fn(&MetricReport) -> f64| results.iter().map(|(_, r)| format!("{:.4}", f(r))).collect();
    render_table(
        "Metric",
        &columns,
        &[
            ("MAE", row(|r| r.mae)),
            ("MAX", row(|r| r.max_err)),
            ("RMSE", row(|r| r.rmse)),
        ],
    )
}

pub fn render_timing_table(reports: &[TimingReport]) -> String {
    let columns: Vec<String> = reports.iter().map(|r| r.method_name.clone()).collect();
    render_table(
        "Cost",
        &columns,
        &[
            (
                "Train Time (s)",
                reports.iter().map(|r| format!("{:.6}", r.train_time_s)).collect(),
            ),
            (
                "Test Time (ms per sample)",
                reports
                    .iter()
                    .map(|r| format!("{:.6}", r.test_time_per_sample_ms))
                    .collect(),
            ),
            ("Active terms", reports.iter().map(|r| r.nnz.to_string()).collect()),
            (
                "Library size",
                reports.iter().map(|r| r.library_size.to_string()).collect(),
            ),
        ],
    )
}
