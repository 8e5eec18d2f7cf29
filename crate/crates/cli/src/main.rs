//! `derbench`: train, search, probe, and report continual-learning
//! experiments on MNIST task streams.
//!
//! - `run` trains one experiment from a JSON config file and saves its
//!   record + checkpoint under the results directory;
//! - `grid` evaluates a hyperparameter grid on a held-out validation split
//!   and prints the winning configuration;
//! - `probe` reopens a saved record/checkpoint pair and measures
//!   calibration, curvature, or replay-memory informativeness;
//! - `report` aggregates saved records into CSV or a markdown table.
//!
//! Success prints the result on stdout (JSON for `run`/`grid`/`probe`, the
//! table for `report`) and exits 0. Any failure prints a single-line JSON
//! object `{"error": …, "kind": …}` on stderr and exits nonzero.

mod probes;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind as ClapErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use derbench_core::error::{ConfigError, RunError};
use derbench_core::harness::{
    default_grid, grid_search, load_mnist_for, load_record, render_csv, render_markdown,
    run_and_save, ExperimentConfig, GridPoint, Setting,
};
use derbench_core::methods::{MethodConfig, MethodKind};
use serde_json::json;

use probes::ProbeParams;

#[derive(Parser)]
#[command(
    name = "derbench",
    version,
    about = "Continual-learning experiments on MNIST task streams"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one experiment from a JSON config file
    Run(RunArgs),
    /// Search a hyperparameter grid on a held-out validation split
    Grid(GridArgs),
    /// Analyze a finished run's saved record and checkpoint
    Probe(ProbeArgs),
    /// Aggregate saved records into a CSV or markdown table
    Report(ReportArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON experiment configuration
    #[arg(long)]
    config: PathBuf,
    /// Override the config file's seed
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config file's dataset directory
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Directory records and checkpoints are saved under
    #[arg(long, default_value = "results")]
    results_dir: PathBuf,
}

#[derive(Args)]
struct GridArgs {
    /// Protocol to tune on: seq_mnist_class, seq_mnist_task, perm_mnist,
    /// rot_mnist, or mnist360
    #[arg(long)]
    setting: String,
    /// Method to tune: sgd, joint, er, der, derpp, fdr, or agem_r
    #[arg(long)]
    method: String,
    /// Replay-memory capacity (rehearsal methods only)
    #[arg(long)]
    buffer: Option<usize>,
    /// Base seed for the validation split and every candidate run
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Dataset directory
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// JSON file holding an explicit list of grid points (defaults to the
    /// method's documented search space)
    #[arg(long)]
    points: Option<PathBuf>,
}

#[derive(Args)]
struct ProbeArgs {
    /// Path to a saved record (.json); its sibling .ckpt is loaded too
    #[arg(long)]
    record: PathBuf,
    /// Which analysis to run
    #[arg(long, value_enum)]
    probe: ProbeKind,
    /// Override the record's dataset directory
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Learning rate for the retrain/fine-tune probes
    #[arg(long, default_value_t = 0.1)]
    probe_lr: f64,
    /// Epochs for the retrain/fine-tune probes
    #[arg(long, default_value_t = 50)]
    probe_epochs: usize,
    /// Batch size for the retrain/fine-tune probes
    #[arg(long, default_value_t = 32)]
    probe_batch: usize,
    /// Examples drawn per class by the fine-tune probe
    #[arg(long, default_value_t = 10)]
    per_class: usize,
    /// Also write a gnuplot-ready curve file (ece and flatness probes)
    #[arg(long)]
    gnuplot: Option<PathBuf>,
}

/// The analyses `probe` can run over a saved checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProbeKind {
    /// Expected calibration error on the evaluation data
    Ece,
    /// Empirical Fisher-information trace on the training data
    Fisher,
    /// Mean loss under Gaussian parameter perturbations
    Flatness,
    /// Retrain a fresh network from the replay memory alone
    BufferRetrain,
    /// Recoverability of each task from a few labeled examples
    BufferFinetune,
}

#[derive(Args)]
struct ReportArgs {
    /// Glob over saved records, e.g. "results/**/*.json"
    #[arg(long)]
    glob: String,
    /// Output format
    #[arg(long, value_enum, default_value = "csv")]
    format: ReportFormat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ReportFormat {
    Csv,
    Md,
}

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

/// Anything the CLI can fail with, tagged for the machine-readable error
/// channel.
pub enum CliError {
    Run(RunError),
    Usage(String),
    Unsupported(String),
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Run(RunError::Data(_)) => "data",
            CliError::Run(RunError::Config(_)) => "config",
            CliError::Run(RunError::MetricUndefined(_)) => "metric_undefined",
            CliError::Run(RunError::Io { .. }) => "io",
            CliError::Run(RunError::CorruptCheckpoint { .. }) => "corrupt_checkpoint",
            CliError::Run(RunError::Json { .. }) => "json",
            CliError::Usage(_) => "usage",
            CliError::Unsupported(_) => "unsupported",
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Run(e) => write!(f, "{e}"),
            CliError::Usage(m) | CliError::Unsupported(m) => f.write_str(m),
        }
    }
}

impl From<RunError> for CliError {
    fn from(e: RunError) -> Self {
        CliError::Run(e)
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Run(RunError::from(e))
    }
}

fn emit_error(message: &str, kind: &str) {
    eprintln!("{}", json!({ "error": message, "kind": kind }));
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            return match e.kind() {
                ClapErrorKind::DisplayHelp | ClapErrorKind::DisplayVersion => {
                    print!("{e}");
                    ExitCode::SUCCESS
                }
                _ => {
                    emit_error(&e.to_string(), "usage");
                    ExitCode::from(2)
                }
            }
        }
    };
    match run_command(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            emit_error(&e.to_string(), e.kind());
            ExitCode::FAILURE
        }
    }
}

fn run_command(command: Command) -> Result<(), CliError> {
    match command {
        Command::Run(args) => cmd_run(args),
        Command::Grid(args) => cmd_grid(args),
        Command::Probe(args) => cmd_probe(args),
        Command::Report(args) => cmd_report(args),
    }
}

fn print_json(value: &serde_json::Value) {
    println!(
        "{}",
        serde_json::to_string_pretty(value).expect("in-memory values serialize")
    );
}

fn read_file(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| RunError::io(path, e).into())
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

fn cmd_run(args: RunArgs) -> Result<(), CliError> {
    let text = read_file(&args.config)?;
    let mut config: ExperimentConfig = serde_json::from_str(&text).map_err(|e| RunError::Json {
        path: args.config.clone(),
        source: e,
    })?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(dir) = args.data_dir {
        config.data_dir = Some(dir);
    }
    config.validate()?;
    let mnist = load_mnist_for(&config)?;
    let (record, path) = run_and_save(&config, &mnist, &args.results_dir)?;
    print_json(&json!({
        "record": path.display().to_string(),
        "final_avg_accuracy": record.final_avg_accuracy,
        "companion_final_avg": record.companion_final_avg,
        "backward_transfer": record.backward_transfer,
        "forward_transfer": record.forward_transfer,
        "forgetting": record.forgetting,
        "wall_time_secs": record.wall_time_secs,
    }));
    Ok(())
}

fn cmd_grid(args: GridArgs) -> Result<(), CliError> {
    let setting = Setting::parse(&args.setting)?;
    let kind = MethodKind::parse(&args.method)?;
    let mut base =
        ExperimentConfig::new(setting, MethodConfig::new(kind, 0.1)).with_seed(args.seed);
    if let Some(capacity) = args.buffer {
        base = base.with_buffer(capacity);
    }
    if let Some(dir) = args.data_dir {
        base.data_dir = Some(dir);
    }
    let points = match &args.points {
        Some(path) => {
            serde_json::from_str::<Vec<GridPoint>>(&read_file(path)?).map_err(|e| {
                RunError::Json {
                    path: path.clone(),
                    source: e,
                }
            })?
        }
        None => default_grid(setting, kind),
    };
    if points.is_empty() {
        return Err(CliError::Unsupported(format!(
            "no search space is defined for {kind} on {setting}"
        )));
    }
    let mnist = load_mnist_for(&base)?;
    let outcome = grid_search(&base, &points, &mnist)?;
    print_json(&json!({
        "best_index": outcome.best_index,
        "best": outcome.best,
        "scores": outcome.scores,
    }));
    Ok(())
}

fn cmd_probe(args: ProbeArgs) -> Result<(), CliError> {
    let params = ProbeParams {
        lr: args.probe_lr,
        epochs: args.probe_epochs,
        batch: args.probe_batch,
        per_class: args.per_class,
    };
    let output = probes::run_probe(
        &args.record,
        args.probe,
        args.data_dir,
        &params,
        args.gnuplot.as_deref(),
    )?;
    print_json(&output);
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<(), CliError> {
    let entries = glob::glob(&args.glob)
        .map_err(|e| CliError::Usage(format!("bad glob pattern {:?}: {e}", args.glob)))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| {
            let path = e.path().to_path_buf();
            CliError::Run(RunError::io(path, e.into()))
        })?;
        paths.push(path);
    }
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Usage(format!(
            "no records match {:?}",
            args.glob
        )));
    }
    let records = paths
        .iter()
        .map(|p| load_record(p))
        .collect::<Result<Vec<_>, _>>()?;
    let rendered = match args.format {
        ReportFormat::Csv => render_csv(&records),
        ReportFormat::Md => render_markdown(&records),
    };
    print!("{rendered}");
    Ok(())
}
