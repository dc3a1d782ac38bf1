//! `crowd-centroid`: simulate → views → aggregate → distill → predict → evaluate.
//!
//! Exit codes: 0 success, 2 usage / configuration / parse / alignment error,
//! 3 numerical failure on otherwise valid data.

mod commands;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::error::{CliError, EXIT_USAGE};

const THREADS_ENV: &str = "CROWD_CENTROID_THREADS";

#[derive(Parser)]
#[command(name = "crowd-centroid", version, about = "Soft labels from crowd annotations")]
#[command(after_help = "Set CROWD_CENTROID_THREADS to cap worker threads. Every command also writes a run manifest.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a synthetic crowd from a TOML description.
    Simulate(SimulateArgs),
    /// Turn annotations into per-item distributions, one per view.
    Views(ViewsArgs),
    /// Combine the views of an ensemble into one distribution per item.
    Aggregate(AggregateArgs),
    /// Train a linear softmax classifier on soft targets.
    Distill(DistillArgs),
    /// Apply a trained model to a features file.
    Predict(PredictArgs),
    /// Score predicted distributions against gold labels.
    Evaluate(EvaluateArgs),
}

#[derive(Args, Serialize)]
pub struct SimulateArgs {
    /// Simulation config (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Directory for annotations.csv, truth.csv, labels.txt, features.csv and manifest.json.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    /// Vote counts divided by their total.
    Standard,
    /// Softmax of the vote counts.
    Softmax,
    /// Dawid-Skene posterior.
    Ds,
    /// MACE posterior.
    Mace,
}

impl View {
    pub fn name(self) -> &'static str {
        match self {
            View::Standard => "standard",
            View::Softmax => "softmax",
            View::Ds => "ds",
            View::Mace => "mace",
        }
    }
}

#[derive(Args, Serialize)]
pub struct ViewsArgs {
    /// Annotations CSV with header item_id,annotator_id,label.
    #[arg(long)]
    pub input: PathBuf,
    /// Label-space file, one label per line in canonical order. Inferred and sorted when absent.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Comma-separated views to compute.
    #[arg(long, value_enum, value_delimiter = ',', default_value = "standard,softmax,ds,mace")]
    pub methods: Vec<View>,
    /// Drop items with fewer annotations than this.
    #[arg(long, default_value_t = 1)]
    pub min_annotations: usize,
    /// Maximum EM iterations per restart.
    #[arg(long, default_value_t = 100)]
    pub em_max_iters: usize,
    /// EM stops when the objective changes by less than this.
    #[arg(long, default_value_t = 1e-6)]
    pub em_tol: f64,
    /// Additive pseudo-count in every EM M-step.
    #[arg(long, default_value_t = 0.01)]
    pub em_smoothing: f64,
    /// Number of EM restarts; the best final objective wins.
    #[arg(long, default_value_t = 5)]
    pub em_restarts: usize,
    /// Seed for EM restarts.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the fitted ds.json / mace.json models here.
    #[arg(long)]
    pub models_dir: Option<PathBuf>,
    /// Ensemble JSONL output.
    #[arg(long)]
    pub output: PathBuf,
    /// Manifest path [default: <output>.manifest.json].
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Args, Serialize)]
pub struct AggregateArgs {
    /// Ensemble JSONL input.
    #[arg(long)]
    pub input: PathBuf,
    /// avg, jsc, temp or hybrid.
    #[arg(long, default_value = "jsc")]
    pub aggregator: String,
    /// Weight of the squared-temperature regularizer.
    #[arg(long, default_value_t = 0.01)]
    pub lambda: f64,
    /// Gradient step for temperature fitting.
    #[arg(long, default_value_t = 0.05)]
    pub step_size: f64,
    /// Maximum temperature-fitting steps.
    #[arg(long, default_value_t = 2000)]
    pub max_steps: usize,
    /// Lower bound on fitted temperatures.
    #[arg(long, default_value_t = 0.25)]
    pub t_min: f64,
    /// Maximum centroid iterations per item.
    #[arg(long, default_value_t = 200)]
    pub cccp_max_iters: usize,
    /// Centroid iterations stop when the objective drops by less than this.
    #[arg(long, default_value_t = 1e-10)]
    pub cccp_tol: f64,
    /// Recorded for reproducibility; every aggregator is deterministic.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Aggregate JSONL output.
    #[arg(long)]
    pub output: PathBuf,
    /// Manifest path [default: <output>.manifest.json].
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Args, Serialize)]
pub struct DistillArgs {
    /// Features CSV: item_id,f0,..,f{D-1}.
    #[arg(long)]
    pub features: PathBuf,
    /// Soft targets: JSONL lines with item_id and probs (e.g. aggregate output).
    #[arg(long)]
    pub targets: PathBuf,
    /// Training config (TOML): step_size, max_epochs, batch_size, l2, seed, tol.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the seed from the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Model JSON output.
    #[arg(long)]
    pub model_out: PathBuf,
    /// Loss trace CSV [default: <model-out>.loss.csv].
    #[arg(long)]
    pub loss_trace: Option<PathBuf>,
    /// Manifest path [default: <model-out>.manifest.json].
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Args, Serialize)]
pub struct PredictArgs {
    /// Model JSON from `distill`.
    #[arg(long)]
    pub model: PathBuf,
    /// Features CSV: item_id,f0,..,f{D-1}.
    #[arg(long)]
    pub features: PathBuf,
    /// Prediction JSONL output (item_id, probs).
    #[arg(long)]
    pub output: PathBuf,
    /// Manifest path [default: <output>.manifest.json].
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Args, Serialize)]
pub struct EvaluateArgs {
    /// JSONL with item_id and probs per line.
    #[arg(long)]
    pub probs: PathBuf,
    /// Gold CSV with header item_id,label.
    #[arg(long)]
    pub gold: PathBuf,
    /// Label-space file giving the class order of `probs`.
    #[arg(long)]
    pub labels: PathBuf,
    /// Number of half/half calibration splits.
    #[arg(long, default_value_t = 5)]
    pub splits: usize,
    /// Seed for the calibration splits.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Lower bound of the calibration temperature search.
    #[arg(long, default_value_t = 0.05)]
    pub t_low: f64,
    /// Upper bound of the calibration temperature search.
    #[arg(long, default_value_t = 50.0)]
    pub t_high: f64,
    /// Report JSON output.
    #[arg(long)]
    pub output: PathBuf,
    /// Optional CSV of per-split values.
    #[arg(long)]
    pub splits_csv: Option<PathBuf>,
    /// Manifest path [default: <output>.manifest.json].
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| CliError::usage(format!("{THREADS_ENV} must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::usage(format!("cannot configure {n} threads: {e}")))
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    match cli.command {
        Command::Simulate(a) => commands::simulate(&a),
        Command::Views(a) => commands::views(&a),
        Command::Aggregate(a) => commands::aggregate(&a),
        Command::Distill(a) => commands::distill(&a),
        Command::Predict(a) => commands::predict(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE as u8 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code as u8)
        }
    }
}
