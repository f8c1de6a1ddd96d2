//! `fxstab` command-line interface.
//!
//! Exit statuses: 0 success, 2 configuration or input error, 3 model
//! evaluation failure, 4 study aborted because too many points failed.

mod commands;
mod inputs;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fxstab::Error;

#[derive(Debug, Parser)]
#[command(name = "fxstab", version, about = "Pointwise forecast-uncertainty and explanation-instability diagnostics")]
struct Cli {
    /// Worker threads (results do not depend on this).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Every uncertainty and instability measure at one point, as JSON.
    Analyze(AnalyzeArgs),
    /// Correlation study over random unit-normal evaluation points.
    Study(StudyArgs),
    /// Uncertainty-gated forecasts for the rows of a points file, as JSONL.
    Gate(GateArgs),
    /// Probes the feature space for points whose uncertainty exceeds the policy.
    MapRegions(MapArgs),
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// Model specification file (JSON) or built-in model name.
    #[arg(long)]
    model: String,
    /// Input dimension for a built-in model.
    #[arg(long)]
    dimension: Option<usize>,
    /// Seed for the random parameters of a built-in model.
    #[arg(long, default_value_t = 0)]
    model_seed: u64,
}

#[derive(Debug, Args)]
struct SamplingArgs {
    #[arg(long, default_value_t = fxstab::sampling::DEFAULT_SIGMA_PERT)]
    sigma_pert: f64,
    #[arg(long, default_value_t = fxstab::sampling::DEFAULT_KERNEL_SIGMA)]
    kernel_sigma: f64,
    /// Samples per surrogate fit.
    #[arg(long, default_value_t = fxstab::sampling::DEFAULT_SURROGATE_SAMPLES)]
    samples: usize,
    /// Replicate surrogates per point.
    #[arg(long, default_value_t = fxstab::sampling::DEFAULT_REPLICATES)]
    replicates: usize,
    /// Perturbations for the conformal statistics [default: the replicate count].
    #[arg(long)]
    conformal_samples: Option<usize>,
    /// Features per top-k set [default: max(1, N/2)].
    #[arg(long)]
    topk: Option<usize>,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    sampling: SamplingArgs,
    /// Query point as comma-separated coordinates.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
    point: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for `analysis.json`; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct StudyArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    sampling: SamplingArgs,
    #[arg(long)]
    seed: u64,
    /// Number of evaluation points.
    #[arg(long, default_value_t = fxstab::study::DEFAULT_POINTS)]
    points: usize,
    #[arg(long, default_value_t = fxstab::study::DEFAULT_LOG_FLOOR)]
    log_floor: f64,
    /// Output directory.
    #[arg(long, default_value = "fxstab-study")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GateArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    sampling: SamplingArgs,
    /// Gate policy (JSON).
    #[arg(long)]
    policy: PathBuf,
    /// Fallback model: a JSON document, or a CSV of training rows whose
    /// last column is the target.
    #[arg(long)]
    fallback: PathBuf,
    /// CSV of query points, one per row.
    #[arg(long)]
    points: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for `decisions.jsonl`; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct MapArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    sampling: SamplingArgs,
    #[arg(long)]
    policy: PathBuf,
    #[arg(long)]
    seed: u64,
    /// Number of unit-normal probe points.
    #[arg(long, default_value_t = fxstab::study::DEFAULT_POINTS, conflicts_with_all = ["lattice", "probes"])]
    points: usize,
    /// Probe an axis-aligned lattice with this many steps per axis instead.
    #[arg(long, conflicts_with = "probes")]
    lattice: Option<usize>,
    /// Half-width of the lattice cube.
    #[arg(long, default_value_t = 1.0, requires = "lattice")]
    bound: f64,
    /// CSV of probe points instead of random probes.
    #[arg(long)]
    probes: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "fxstab-regions")]
    out: PathBuf,
}

/// A failed command: message plus exit status.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::StudyAborted { .. } => 4,
            e if e.is_model_failure() => 3,
            _ => 2,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Analyze(a) => commands::analyze(a),
        Command::Study(a) => commands::study(a),
        Command::Gate(a) => commands::gate(a),
        Command::MapRegions(a) => commands::map_regions(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
