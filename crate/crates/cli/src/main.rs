use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use soh_core::estimator::{
    compare_methods, holdout_split, labeled_dataset, observe_path, train_from_observations, with_true_labels,
    write_estimates, EstimatorError, HoldoutSplit, PipelineConfig, SkippedCycle, TrainedEstimator,
};
use soh_core::eval::{bench, render_metric_table, render_timing_table, EvalError, Method, TimingReport};
use soh_core::features::{correlation_gate, write_feature_matrix};
use soh_core::ingest::{label_capacities, write_labels, IngestError};
use soh_core::simulate::{
    read_ground_truth, simulate_to_dir, sparse_regression_rows, SimConfig, SimError, GROUND_TRUTH_FILE,
};
use soh_core::sindy::SindyError;

const DEFAULT_TRAINED_AT: &str = "1970-01-01T00:00:00Z";

#[derive(Parser)]
#[command(
    name = "sindy-soh",
    version,
    about = "Sparse polynomial SOH estimation from CC-CV charge logs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic aging fleet: one CSV per cell plus ground_truth.csv.
    Simulate(SimulateArgs),
    /// Coulomb-count and label every cycle; writes the label CSV.
    Ingest(DataArgs),
    /// Extract the seven CV features per cycle; writes the feature matrix CSV.
    Features(DataArgs),
    /// Correlate features with SOH on the training cells.
    Correlate(CorrelateArgs),
    /// Train an estimator file.
    Train(TrainArgs),
    /// Estimate SOH per cycle with a trained estimator.
    Estimate(EstimateArgs),
    /// Compare SINDy and baselines on held-out cells.
    Evaluate(EvaluateArgs),
    /// Time training and prediction of SINDy and baselines.
    Bench(BenchArgs),
}

#[derive(Args)]
struct ConfigArg {
    /// Pipeline configuration JSON; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct ModelArgs {
    /// Cells excluded from training (comma separated).
    #[arg(long, value_delimiter = ',')]
    holdout: Vec<String>,
    #[arg(long)]
    degree: Option<u32>,
    /// STLS hard threshold.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    /// Minimum |rho| for a feature to be kept.
    #[arg(long)]
    gate: Option<f64>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    cells: Option<usize>,
    #[arg(long)]
    cycles: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Sample interval in seconds.
    #[arg(long)]
    dt: Option<f64>,
    /// Simulator configuration JSON; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct DataArgs {
    /// Cycle CSV file or directory of them.
    #[arg(long)]
    data: PathBuf,
    /// Output CSV; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Args)]
struct CorrelateArgs {
    #[arg(long)]
    data: PathBuf,
    /// Output JSON; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    holdout: Vec<String>,
    #[arg(long)]
    gate: Option<f64>,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Estimator file to write (conventionally *.sindy-soh.json).
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    /// Timestamp recorded in the model file.
    #[arg(long, default_value = DEFAULT_TRAINED_AT)]
    trained_at: String,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Output CSV; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(long, default_value_t = 1e-3)]
    ridge_alpha: f64,
    #[arg(long, default_value_t = 2.0)]
    kernel_lengthscale: f64,
    #[arg(long, default_value_t = 0.1)]
    kernel_noise: f64,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    data: PathBuf,
    /// Simulator ground truth; defaults to ground_truth.csv beside the data
    /// when present, otherwise held-out cells are scored against their labels.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// JSON report path.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    baselines: BaselineArgs,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Args)]
struct BenchArgs {
    /// Cycle data to benchmark on; synthetic rows when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    train_rows: usize,
    #[arg(long, default_value_t = 100)]
    test_rows: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Label noise sd for synthetic rows.
    #[arg(long, default_value_t = 0.01)]
    noise: f64,
    #[arg(long, default_value_t = 5)]
    repetitions: usize,
    /// JSON report path.
    #[arg(long, default_value = "bench.json")]
    out: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    baselines: BaselineArgs,
    #[command(flatten)]
    config: ConfigArg,
}

enum Failure {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numerical(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Numerical(m) => m,
        }
    }
}

fn sindy_failure(e: &SindyError) -> Failure {
    match e {
        SindyError::NumericalFailure(_) | SindyError::NoActiveTerms { .. } => Failure::Numerical(e.to_string()),
        SindyError::InvalidParameter(_) => Failure::Usage(e.to_string()),
        _ => Failure::Data(e.to_string()),
    }
}

impl From<EstimatorError> for Failure {
    fn from(e: EstimatorError) -> Self {
        match &e {
            EstimatorError::Sindy(s) => sindy_failure(s),
            EstimatorError::Eval(v) => v.into(),
            EstimatorError::InvalidConfig(_) | EstimatorError::Ingest(IngestError::InvalidConfig(_)) => {
                Failure::Usage(e.to_string())
            }
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<&EvalError> for Failure {
    fn from(e: &EvalError) -> Self {
        match e {
            EvalError::Sindy(s) => sindy_failure(s),
            EvalError::NumericalFailure(_) => Failure::Numerical(e.to_string()),
            EvalError::InvalidParameter(_) => Failure::Usage(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        (&e).into()
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        match e {
            SimError::InvalidConfig(_) => Failure::Usage(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn io_failure(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Data(format!("{}: {e}", path.display()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
    serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn pipeline_config(config: &ConfigArg, model: Option<&ModelArgs>) -> CliResult<PipelineConfig> {
    let mut c: PipelineConfig = match &config.config {
        Some(p) => read_json(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(m) = model {
        if !m.holdout.is_empty() {
            c.holdout = m.holdout.clone();
        }
        if let Some(d) = m.degree {
            c.library_degree = d;
        }
        if let Some(t) = m.threshold {
            c.stls.threshold = t;
        }
        if let Some(i) = m.max_iter {
            c.stls.max_iter = i;
        }
        if let Some(g) = m.gate {
            c.correlation_gate = g;
        }
    }
    c.validate().map_err(Failure::from)?;
    Ok(c)
}

/// Buffered writer to `path`, or stdout.
fn output(path: Option<&Path>) -> CliResult<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| io_failure(p, e))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn write_text(path: &Path, text: &str) -> CliResult {
    std::fs::write(path, text).map_err(|e| io_failure(path, e))
}

fn report_skipped(skipped: &[SkippedCycle]) {
    for s in skipped {
        warn!("skipped {} cycle {}: {}", s.cell_id, s.cycle_index, s.reason);
    }
    if !skipped.is_empty() {
        eprintln!("{} cycle(s) skipped", skipped.len());
    }
}

fn simulate(args: SimulateArgs) -> CliResult {
    let mut config: SimConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => SimConfig::default(),
    };
    if let Some(v) = args.cells {
        config.num_cells = v;
    }
    if let Some(v) = args.cycles {
        config.cycles_per_cell = v;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }
    if let Some(v) = args.dt {
        config.sample_dt_s = v;
    }
    let files = simulate_to_dir(&config, &args.out)?;
    info!("wrote {} files to {}", files.len(), args.out.display());
    Ok(())
}

fn ingest(args: DataArgs) -> CliResult {
    let config = pipeline_config(&args.config, None)?;
    let (observations, skipped) = observe_path(&args.data, &config.protocol)?;
    report_skipped(&skipped);
    let mut labels = Vec::new();
    let mut start = 0;
    while start < observations.len() {
        let cell = &observations[start].cell_id;
        let end = start + observations[start..].iter().take_while(|o| &o.cell_id == cell).count();
        let capacities: Vec<(u32, f64)> = observations[start..end]
            .iter()
            .map(|o| (o.cycle_index, o.capacity_ah))
            .collect();
        labels.extend(
            label_capacities(cell, &capacities, config.smoothing, &config.protocol)
                .map_err(|e| Failure::Data(e.to_string()))?,
        );
        start = end;
    }
    let out = output(args.out.as_deref())?;
    write_labels(out, &labels).map_err(|e| Failure::Data(e.to_string()))
}

fn features(args: DataArgs) -> CliResult {
    let config = pipeline_config(&args.config, None)?;
    let (observations, skipped) = observe_path(&args.data, &config.protocol)?;
    report_skipped(&skipped);
    let (dataset, dropped) = labeled_dataset(&observations, &config, |_| true)?;
    report_skipped(&dropped);
    let out = output(args.out.as_deref())?;
    write_feature_matrix(out, &dataset).map_err(|e| Failure::Data(e.to_string()))
}

fn correlate(args: CorrelateArgs) -> CliResult {
    let mut config = pipeline_config(&args.config, None)?;
    if !args.holdout.is_empty() {
        config.holdout = args.holdout;
    }
    if let Some(g) = args.gate {
        config.correlation_gate = g;
    }
    config.validate()?;
    let (observations, skipped) = observe_path(&args.data, &config.protocol)?;
    report_skipped(&skipped);
    let (dataset, _) = labeled_dataset(&observations, &config, |c| !config.is_holdout(c))?;
    let report = correlation_gate(&dataset, config.correlation_gate).map_err(|e| Failure::Data(e.to_string()))?;
    let mut out = output(args.out.as_deref())?;
    writeln!(out, "{}", report.to_json()).map_err(|e| Failure::Data(e.to_string()))
}

fn train(args: TrainArgs) -> CliResult {
    let config = pipeline_config(&args.config, Some(&args.model))?;
    let (observations, skipped) = observe_path(&args.data, &config.protocol)?;
    report_skipped(&skipped);
    let estimator = train_from_observations(&observations, &config, &args.trained_at)?;
    estimator.save(&args.out)?;
    let m = &estimator.train_metrics;
    println!(
        "features: {}\nactive terms: {} of {}\ntrain MAE {:.4} RMSE {:.4} MAX {:.4} over {} cycles",
        estimator.report.selected.join(", "),
        estimator.model.nnz(),
        estimator.model.library.len(),
        m.mae,
        m.rmse,
        m.max_err,
        m.n
    );
    Ok(())
}

fn estimate(args: EstimateArgs) -> CliResult {
    let estimator = TrainedEstimator::load(&args.model)?;
    let result = estimator.estimate_path(&args.data)?;
    report_skipped(&result.skipped);
    let out = output(args.out.as_deref())?;
    write_estimates(out, &result.estimates).map_err(|e| Failure::Data(e.to_string()))
}

fn methods(config: &PipelineConfig, b: &BaselineArgs) -> [Method; 3] {
    [
        Method::Sindy {
            degree: config.library_degree,
            params: config.stls,
        },
        Method::Ridge {
            degree: config.library_degree,
            alpha: b.ridge_alpha,
        },
        Method::Kernel {
            lengthscale: b.kernel_lengthscale,
            noise_sd: b.kernel_noise,
        },
    ]
}

fn require_holdout(config: &PipelineConfig) -> CliResult {
    if config.holdout.is_empty() {
        return Err(Failure::Usage("--holdout is required".into()));
    }
    Ok(())
}

fn evaluate(args: EvaluateArgs) -> CliResult {
    let config = pipeline_config(&args.config, Some(&args.model))?;
    require_holdout(&config)?;
    let (observations, skipped) = observe_path(&args.data, &config.protocol)?;
    report_skipped(&skipped);
    let mut split = holdout_split(&observations, &config)?;
    let beside = args
        .data
        .is_dir()
        .then(|| args.data.join(GROUND_TRUTH_FILE))
        .filter(|p| p.is_file());
    let reference = match args.truth.or(beside) {
        Some(path) => {
            let truth = read_ground_truth(&path)?;
            split.test = with_true_labels(&split.test, &truth)?;
            "ground truth"
        }
        None => "measured labels",
    };
    let results = compare_methods(&split, &methods(&config, &args.baselines))?;
    println!(
        "held-out cells: {} (scored against {reference})",
        config.holdout.join(", ")
    );
    print!("{}", render_metric_table(&results));
    if let Some(path) = &args.out {
        let json = serde_json::json!({
            "holdout": config.holdout,
            "reference": reference,
            "results": results.iter().map(|(n, r)| serde_json::json!({"method": n, "metrics": r})).collect::<Vec<_>>(),
        });
        write_text(
            path,
            &format!("{}\n", serde_json::to_string_pretty(&json).expect("report serializes")),
        )?;
    }
    Ok(())
}

fn bench_cmd(args: BenchArgs) -> CliResult {
    let config = pipeline_config(&args.config, Some(&args.model))?;
    let split = match &args.data {
        Some(data) => {
            require_holdout(&config)?;
            let (observations, skipped) = observe_path(data, &config.protocol)?;
            report_skipped(&skipped);
            holdout_split(&observations, &config)?
        }
        None => {
            let train =
                sparse_regression_rows(args.train_rows, args.seed, args.noise).map_err(|e| sindy_failure(&e))?;
            let test = sparse_regression_rows(args.test_rows, args.seed.wrapping_add(1), args.noise)
                .map_err(|e| sindy_failure(&e))?;
            HoldoutSplit {
                train,
                test,
                report: Default::default(),
            }
        }
    };
    let reports = methods(&config, &args.baselines)
        .iter()
        .map(|m| bench(m, &split.train, &split.test, args.repetitions))
        .collect::<Result<Vec<TimingReport>, _>>()?;
    let accuracy = compare_methods(&split, &methods(&config, &args.baselines))?;
    println!(
        "{} training rows, {} test rows, median of {} runs",
        split.train.len(),
        split.test.len(),
        args.repetitions
    );
    print!("{}", render_metric_table(&accuracy));
    println!();
    print!("{}", render_timing_table(&reports));
    let json = serde_json::json!({
        "train_rows": split.train.len(),
        "test_rows": split.test.len(),
        "timing": reports,
        "accuracy": accuracy.iter().map(|(n, r)| serde_json::json!({"method": n, "metrics": r})).collect::<Vec<_>>(),
    });
    write_text(
        &args.out,
        &format!("{}\n", serde_json::to_string_pretty(&json).expect("report serializes")),
    )
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Ingest(a) => ingest(a),
        Command::Features(a) => features(a),
        Command::Correlate(a) => correlate(a),
        Command::Train(a) => train(a),
        Command::Estimate(a) => estimate(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Bench(a) => bench_cmd(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
