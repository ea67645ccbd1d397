//! `altsim`: generate mass-spring data, train and evaluate the recurrent
//! graph models, check gradients and inspect checkpoints.
//!
//! Exit codes: 0 success, 1 failed check or run, 2 usage or configuration
//! error.

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod chart;
mod commands;
mod config;
mod dataset;

/// Bad flags, bad configuration or missing inputs: exit code 2.
#[derive(Debug)]
pub struct UsageError(String);

impl UsageError {
    pub fn new(msg: impl Into<String>) -> Self {
        Self(msg.into())
    }
}

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// A check that ran to completion and failed: exit code 1.
#[derive(Debug)]
pub struct CheckFailed(String);

impl fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

#[derive(Parser, Debug)]
#[command(name = "altsim", version, about = "Learned mass-spring dynamics on graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate driver/tissue trajectories into a dataset directory.
    GenData(GenDataArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Single-step and roll-out errors of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Export predicted tissue frames for one sequence.
    Predict(PredictArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Summarize a checkpoint or trajectory file.
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
pub struct ConfigArg {
    /// TOML configuration; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub cfg: ConfigArg,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// grid or ring.
    #[arg(long)]
    pub mesh: Option<String>,
    #[arg(long)]
    pub nx: Option<usize>,
    #[arg(long)]
    pub ny: Option<usize>,
    /// Grid spacing, m.
    #[arg(long)]
    pub spacing: Option<f64>,
    /// Ring node count.
    #[arg(long)]
    pub nodes: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub sequences: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated motion kinds (swing, twist, bounce, sway, static).
    #[arg(long, value_delimiter = ',')]
    pub motions: Option<Vec<String>>,
    /// Freeze every driver after this many seconds.
    #[arg(long)]
    pub stop_after: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArg,
    /// Training dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Validation dataset directory; the training loss selects the
    /// checkpoint without one.
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// alt, convlstm-cp-y, convlstm-np-y, convlstm-cp-dy or convlstm-np-dy.
    #[arg(long)]
    pub model: Option<String>,
    /// Comma-separated hidden widths; drops the configured skips.
    #[arg(long, value_delimiter = ',')]
    pub schedule: Option<Vec<usize>>,
    /// Factor applied to every initial weight and bias.
    #[arg(long)]
    pub init_gain: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Per-epoch learning-rate factor.
    #[arg(long)]
    pub lr_decay: Option<f64>,
    /// L2 penalty coefficient.
    #[arg(long)]
    pub l2: Option<f64>,
    #[arg(long)]
    pub t_train: Option<usize>,
    /// Seeds both the initial weights and the epoch shuffles.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub cfg: ConfigArg,
    /// Checkpoint file.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// single-step, rollout or both.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long, value_delimiter = ',')]
    pub horizons: Option<Vec<usize>>,
    /// Directory for report files; the CSV always goes to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Index of the sequence in the dataset manifest.
    #[arg(long, default_value_t = 0)]
    pub sequence: usize,
    /// single-step or rollout.
    #[arg(long, default_value = "rollout")]
    pub mode: String,
    /// Number of predicted frames; defaults to the whole sequence.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Output trajectory file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[arg(long, default_value = "alt")]
    pub model: String,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Corrupt one backward rule (e.g. matmul, propagate) as a negative
    /// control.
    #[arg(long)]
    pub inject_fault: Option<String>,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    /// Checkpoint or trajectory file.
    pub file: PathBuf,
    #[arg(long, conflicts_with = "csv")]
    pub json: bool,
    #[arg(long)]
    pub csv: bool,
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var("ALTSIM_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| UsageError::new(format!("ALTSIM_THREADS must be a positive integer, got '{raw}'")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    configure_threads()?;
    match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Predict(a) => commands::predict(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Inspect(a) => commands::inspect(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
