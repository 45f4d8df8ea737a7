mod settings;

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use prunecert::bounds::{Bound, WsrVariant};
use prunecert::evaluate::{
    confidence_sweep, evaluate_test_with, run_baseline, run_trials, tradeoff, BaselineMethod, TrialConfig,
};
use prunecert::ingest::snapshot::{read_snapshot, write_snapshot};
use prunecert::ingest::{build_dataset, parse_qrels, parse_run, BetaChoice, Preparation, DEFAULT_POOL_SIZE};
use prunecert::metrics::DEFAULT_K;
use prunecert::synthetic::{generate, SynthConfig};
use prunecert::{CalibrationConfig, CalibrationResult, Calibrator, CorrectionMode, Dataset, ErrorCategory, GridSpec, Metric};
use serde::Serialize;

use settings::{SettingsError, UsageError};

#[derive(Parser)]
#[command(name = "prunecert", version, about = "Certified candidate pruning for two-stage ranking")]
#[command(args_override_self = true)]
struct Cli {
    /// Versioned TOML file of default flag values; explicit flags win.
    /// Consumed before parsing; declared here for the help text.
    #[arg(long, global = true, value_name = "F")]
    #[allow(dead_code)]
    settings: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Join TREC run files and qrels into a dataset snapshot.
    Ingest(IngestArgs),
    /// Generate a synthetic dataset snapshot from a TOML config.
    Synth(SynthArgs),
    /// Choose a pruning threshold on a labelled dataset.
    Calibrate(CalibrateArgs),
    /// Apply a calibration result to a dataset.
    Evaluate(EvaluateArgs),
    /// Repeated calibration/test splits at one risk level.
    Trials(TrialsArgs),
    /// Size and quality across several risk levels, as CSV.
    Tradeoff(MultiAlphaArgs),
    /// Corrected confidence and coverage across risk levels, as CSV.
    SweepConfidence(MultiAlphaArgs),
    /// Empirically tuned score or rank cutoffs.
    Baseline(BaselineArgs),
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long, value_name = "F")]
    retriever_run: PathBuf,
    #[arg(long, value_name = "F")]
    reranker_run: PathBuf,
    #[arg(long, value_name = "F")]
    qrels: PathBuf,
    #[arg(long, default_value_t = DEFAULT_POOL_SIZE)]
    pool_size: usize,
    #[arg(long, value_name = "F")]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_name = "F")]
    config: PathBuf,
    #[arg(long, value_name = "F")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Risk,
    Confidence,
    Both,
}

impl From<ModeArg> for CorrectionMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Risk => CorrectionMode::Risk,
            ModeArg::Confidence => CorrectionMode::Confidence,
            ModeArg::Both => CorrectionMode::Both,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum WsrArg {
    Predictable,
    Printed,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Est,
    Ert,
}

fn parse_metric(s: &str) -> std::result::Result<Metric, String> {
    match s {
        "recall" => Ok(Metric::Recall),
        _ => s
            .strip_prefix("mrr@")
            .and_then(|k| k.parse::<usize>().ok())
            .filter(|&k| k > 0)
            .map(|k| Metric::Mrr { k })
            .ok_or_else(|| format!("expected mrr@K or recall, got {s}")),
    }
}

/// Threshold grid, loss, and bound shared by every calibrating command.
#[derive(Args)]
struct CalibrationFlags {
    /// Spacing of the threshold grid.
    #[arg(long, value_name = "S", conflicts_with = "exact")]
    grid_step: Option<f64>,
    /// Use every breakpoint of the empirical risk as the grid.
    #[arg(long)]
    exact: bool,
    #[arg(long, default_value = "mrr@10", value_parser = parse_metric)]
    metric: Metric,
    /// Betting-fraction variant of the confidence bound.
    #[arg(long, value_enum, default_value = "predictable")]
    compat_wsr: WsrArg,
}

impl CalibrationFlags {
    fn config(&self) -> CalibrationConfig {
        let grid = if self.exact {
            GridSpec::Exact
        } else {
            self.grid_step.map_or_else(GridSpec::default, GridSpec::Step)
        };
        let variant = match self.compat_wsr {
            WsrArg::Predictable => WsrVariant::Predictable,
            WsrArg::Printed => WsrVariant::Printed,
        };
        CalibrationConfig {
            grid,
            metric: self.metric,
            bound: Bound::Wsr(variant),
            wsr_shuffle: None,
        }
    }

    fn k(&self) -> usize {
        match self.metric {
            Metric::Mrr { k } => k,
            Metric::Recall => DEFAULT_K,
        }
    }
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long, value_name = "F")]
    data: PathBuf,
    #[arg(long)]
    alpha: f64,
    #[arg(long, default_value_t = 0.1)]
    delta: f64,
    #[arg(long, value_enum, default_value = "risk")]
    mode: ModeArg,
    #[command(flatten)]
    calibration: CalibrationFlags,
    /// Fixed fusion weight instead of searching on the data.
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long, value_name = "F")]
    out: PathBuf,
    /// Risk curve CSV; defaults to the result path with a `.curve.csv` suffix.
    #[arg(long, value_name = "F")]
    curve: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long, value_name = "F")]
    data: PathBuf,
    #[arg(long, value_name = "F")]
    calibration: PathBuf,
    #[arg(long, default_value = "mrr@10", value_parser = parse_metric)]
    metric: Metric,
    #[arg(long, value_name = "F")]
    out: PathBuf,
}

/// Split and repetition settings shared by the trial commands.
#[derive(Args)]
struct TrialFlags {
    #[arg(long, value_name = "F")]
    pool: PathBuf,
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 5000)]
    calib_size: usize,
    #[arg(long, default_value_t = 6980)]
    test_size: usize,
    #[arg(long, default_value_t = 0.1)]
    delta: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    beta: Option<f64>,
    /// Worker threads; results do not depend on this.
    #[arg(long)]
    workers: Option<usize>,
    #[command(flatten)]
    calibration: CalibrationFlags,
}

impl TrialFlags {
    fn config(&self, mode: CorrectionMode) -> TrialConfig {
        TrialConfig {
            n_trials: self.n,
            calib_size: self.calib_size,
            test_size: self.test_size,
            delta: self.delta,
            mode,
            master_seed: self.seed,
            calibration: self.calibration.config(),
            beta: beta_choice(self.beta),
            workers: self.workers,
        }
    }
}

#[derive(Args)]
struct TrialsArgs {
    #[command(flatten)]
    trial: TrialFlags,
    #[arg(long)]
    alpha: f64,
    #[arg(long, value_enum, default_value = "risk")]
    mode: ModeArg,
    #[arg(long, value_name = "D")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct MultiAlphaArgs {
    #[command(flatten)]
    trial: TrialFlags,
    #[arg(long, value_delimiter = ',', required = true)]
    alphas: Vec<f64>,
    #[arg(long, value_enum, default_value = "risk")]
    mode: ModeArg,
    #[arg(long, value_name = "F")]
    out: PathBuf,
}

#[derive(Args)]
struct BaselineArgs {
    #[command(flatten)]
    trial: TrialFlags,
    #[arg(long, value_enum)]
    method: MethodArg,
    #[arg(long)]
    required_mrr: f64,
    /// Summary JSON; printed to stdout when absent.
    #[arg(long, value_name = "F")]
    out: Option<PathBuf>,
    /// Per-trial JSONL.
    #[arg(long, value_name = "F")]
    trials_out: Option<PathBuf>,
}

fn beta_choice(beta: Option<f64>) -> BetaChoice {
    beta.map_or_else(BetaChoice::default, BetaChoice::Fixed)
}

fn read_dataset(path: &Path) -> Result<Dataset> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_snapshot(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn write_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut out = create(path)?;
    write_snapshot(dataset, &mut out)?;
    out.flush()?;
    Ok(())
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

fn write_jsonl<T: Serialize>(items: &[T], path: &Path) -> Result<()> {
    let mut out = create(path)?;
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

fn write_csv<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

fn ingest(args: &IngestArgs) -> Result<()> {
    let open = |p: &Path| -> Result<BufReader<File>> {
        Ok(BufReader::new(File::open(p).with_context(|| format!("opening {}", p.display()))?))
    };
    let retriever = parse_run(open(&args.retriever_run)?).with_context(|| format!("reading {}", args.retriever_run.display()))?;
    let reranker = parse_run(open(&args.reranker_run)?).with_context(|| format!("reading {}", args.reranker_run.display()))?;
    let qrels = parse_qrels(open(&args.qrels)?).with_context(|| format!("reading {}", args.qrels.display()))?;
    let mut dataset = build_dataset(&retriever, &reranker, &qrels, args.pool_size)?;
    dataset.meta.sources = [&args.retriever_run, &args.reranker_run, &args.qrels]
        .iter()
        .map(|p| p.display().to_string())
        .collect();
    write_dataset(&dataset, &args.out)
}

fn synth(args: &SynthArgs) -> Result<()> {
    let text = fs::read_to_string(&args.config).with_context(|| format!("reading {}", args.config.display()))?;
    let config: SynthConfig = toml::from_str(&text).with_context(|| format!("parsing {}", args.config.display()))?;
    write_dataset(&generate(&config)?, &args.out)
}

fn curve_path(out: &Path) -> PathBuf {
    let mut name = out.file_stem().unwrap_or_default().to_os_string();
    name.push(".curve.csv");
    out.with_file_name(name)
}

fn calibrate(args: &CalibrateArgs) -> Result<()> {
    let raw = read_dataset(&args.data)?;
    let preparation = Preparation::fit(&raw, beta_choice(args.beta), args.calibration.k())?;
    let data = preparation.apply(&raw)?;
    let mut calibrator = Calibrator::new(&data, &args.calibration.config())?;
    let mut result: CalibrationResult = calibrator.calibrate(args.alpha, args.delta, args.mode.into())?;
    result.preparation = Some(preparation);
    let curve = calibrator.curve(args.delta)?;
    write_json(&result, &args.out)?;
    let curve_out = args.curve.clone().unwrap_or_else(|| curve_path(&args.out));
    curve.write_csv(create(&curve_out)?)?;
    Ok(())
}

fn evaluate(args: &EvaluateArgs) -> Result<()> {
    let data = read_dataset(&args.data)?;
    let text = fs::read_to_string(&args.calibration).with_context(|| format!("reading {}", args.calibration.display()))?;
    let result: CalibrationResult =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", args.calibration.display()))?;
    write_json(&evaluate_test_with(&data, &result, args.metric)?, &args.out)
}

fn trials(args: &TrialsArgs) -> Result<()> {
    let pool = read_dataset(&args.trial.pool)?;
    let outcome = run_trials(&pool, args.alpha, &args.trial.config(args.mode.into()))?;
    write_jsonl(&outcome.reports, &args.out_dir.join("trials.jsonl"))?;
    write_json(&outcome.summary, &args.out_dir.join("summary.json"))
}

fn tradeoff_cmd(args: &MultiAlphaArgs) -> Result<()> {
    let pool = read_dataset(&args.trial.pool)?;
    let rows = tradeoff(&pool, &args.alphas, &args.trial.config(args.mode.into()))?;
    write_csv(&rows, &args.out)
}

fn sweep_confidence(args: &MultiAlphaArgs) -> Result<()> {
    let pool = read_dataset(&args.trial.pool)?;
    let rows = confidence_sweep(&pool, &args.alphas, &args.trial.config(CorrectionMode::Confidence))?;
    write_csv(&rows, &args.out)
}

fn baseline(args: &BaselineArgs) -> Result<()> {
    let pool = read_dataset(&args.trial.pool)?;
    let method = match args.method {
        MethodArg::Est => BaselineMethod::Est,
        MethodArg::Ert => BaselineMethod::Ert,
    };
    let (summary, reports) = run_baseline(&pool, method, args.required_mrr, &args.trial.config(CorrectionMode::Risk))?;
    if let Some(path) = &args.trials_out {
        write_jsonl(&reports, path)?;
    }
    match &args.out {
        Some(path) => write_json(&summary, path),
        None => {
            println!("{}", serde_json::to_string_pretty(&summary)?);
            Ok(())
        }
    }
}

/// Category and exit code of a failure.
fn classify(err: &anyhow::Error) -> (&'static str, u8) {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return ("usage", 2);
        }
        if let Some(e) = cause.downcast_ref::<prunecert::Error>() {
            return match e.category() {
                ErrorCategory::Io => ("io", 3),
                ErrorCategory::Parse => ("parse", 4),
                ErrorCategory::Domain => ("domain", 5),
            };
        }
        if cause.is::<std::io::Error>() {
            return ("io", 3);
        }
        if cause.is::<serde_json::Error>() || cause.is::<toml::de::Error>() || cause.is::<SettingsError>() {
            return ("parse", 4);
        }
        if let Some(e) = cause.downcast_ref::<csv::Error>() {
            return if e.is_io_error() { ("io", 3) } else { ("parse", 4) };
        }
    }
    ("domain", 5)
}

/// Command line with settings-file entries spliced in ahead of the
/// subcommand's own flags, so explicit flags override them.
fn expand_args() -> Result<Vec<OsString>> {
    let mut args: Vec<OsString> = std::env::args_os().collect();
    let Some(path) = settings::take_settings_flag(&mut args)? else {
        return Ok(args);
    };
    let Some(pos) = settings::subcommand_position(&args) else {
        return Ok(args);
    };
    let root = Cli::command();
    let name = args[pos].to_string_lossy().into_owned();
    let Some(sub) = root.find_subcommand(&name) else {
        return Ok(args);
    };
    let extra = settings::settings_args(Path::new(&path), sub)?;
    args.splice(pos + 1..pos + 1, extra);
    Ok(args)
}

fn run() -> Result<()> {
    let args = expand_args()?;
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or_default();
            return Err(UsageError(first.trim_start_matches("error: ").to_string()).into());
        }
    };
    match &cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Synth(a) => synth(a),
        Command::Calibrate(a) => calibrate(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Trials(a) => trials(a),
        Command::Tradeoff(a) => tradeoff_cmd(a),
        Command::SweepConfidence(a) => sweep_confidence(a),
        Command::Baseline(a) => baseline(a),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (category, code) = classify(&err);
            let message = format!("{err:#}").replace('\n', " ");
            eprintln!("error: category={category} message={message}");
            ExitCode::from(code)
        }
    }
}
