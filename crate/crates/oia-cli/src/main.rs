//! `oia` — command-line harness around the object-induced action model:
//! synthetic dataset generation, training, evaluation, experiment grids,
//! and report rendering.
//!
//! Exit codes: 0 success, 2 usage error, 3 data/config error, 4 numeric
//! abort during training or evaluation.

mod dataset;
mod run;
mod table;

use clap::{Args, Parser, Subcommand};
use oia_core::OiaError;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "oia", version, about = "Object-induced action prediction harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with planted causal structure.
    GenData(GenDataArgs),
    /// Train on a generated dataset and write checkpoints plus a CSV log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split and print its report row.
    Eval(EvalArgs),
    /// Run a named experiment grid over several seeds.
    Ablate(AblateArgs),
    /// Render a CSV report as a markdown table.
    Report(ReportArgs),
}

#[derive(Args)]
pub struct GenDataArgs {
    /// Output directory for features, split files, and the manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of scenes to generate.
    #[arg(long, default_value_t = 100)]
    pub scenes: usize,
    /// Generation seed; every artifact is a pure function of it.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Channel profile, "scaled" or "full".
    #[arg(long, default_value = "scaled")]
    pub profile: String,
    /// Gaussian feature noise sigma.
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    /// Train/val/test percentages, e.g. "70,10,20".
    #[arg(long, default_value = "70,10,20")]
    pub split: String,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Dataset directory produced by gen-data.
    #[arg(long)]
    pub data: PathBuf,
    /// Explanation loss weight; a number, or "inf" for explanation-only.
    #[arg(long, default_value = "1")]
    pub lambda: String,
    /// Number of selected objects.
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Structural variant: full, local-only, global-only, random-selector,
    /// or single-action.
    #[arg(long, default_value = "full")]
    pub ablation: String,
    /// Training seed (init, shuffling, random selection).
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    /// Final checkpoint path; the best-epoch checkpoint gets a ".best"
    /// suffix before the extension.
    #[arg(long, default_value = "model.oiac")]
    pub out: PathBuf,
    /// Training log CSV path; defaults to the checkpoint path with a .csv
    /// extension.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Dataset directory produced by gen-data.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint to evaluate.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Which split to evaluate: train, val, or test.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Structural variant used for the forward pass.
    #[arg(long, default_value = "full")]
    pub ablation: String,
    /// Seed for the random-selector variant.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write one line per scene: id, action mask, explanation mask, and the
    /// selected object indices with scores.
    #[arg(long)]
    pub dump_predictions: Option<PathBuf>,
    /// Write the channel-mean of the global feature map per scene as plain
    /// portable graymaps into this directory.
    #[arg(long)]
    pub dump_global_map: Option<PathBuf>,
}

#[derive(Args)]
pub struct AblateArgs {
    /// Dataset directory produced by gen-data.
    #[arg(long)]
    pub data: PathBuf,
    /// Grid name: lambda-sweep, branch-ablation, or single-vs-multi.
    #[arg(long)]
    pub grid: String,
    /// Comma-separated training seeds, e.g. "1,2,3".
    #[arg(long, default_value = "1,2,3")]
    pub seeds: String,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    /// Aggregate CSV output path; the markdown table goes to stdout.
    #[arg(long, default_value = "ablation.csv")]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct ReportArgs {
    /// CSV file to render.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Output format; only "markdown" is supported.
    #[arg(long, default_value = "markdown")]
    pub format: String,
}

/// Honor OIA_THREADS as a cap on the worker pool before any work starts.
fn configure_threads() -> oia_core::Result<()> {
    let value = match std::env::var("OIA_THREADS") {
        Ok(v) => v,
        Err(std::env::VarError::NotPresent) => return Ok(()),
        Err(e) => return Err(OiaError::Config(format!("OIA_THREADS: {e}"))),
    };
    let n: usize = value.parse().map_err(|_| {
        OiaError::Config(format!("OIA_THREADS must be a positive integer, got {value:?}"))
    })?;
    if n == 0 {
        return Err(OiaError::Config("OIA_THREADS must be >= 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| OiaError::Config(format!("thread pool: {e}")))
}

fn exit_code(err: &OiaError) -> u8 {
    match err {
        OiaError::Numeric(_) => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match cli.command {
        Command::GenData(args) => run::gen_data(&args),
        Command::Train(args) => run::train(&args),
        Command::Eval(args) => run::eval(&args),
        Command::Ablate(args) => run::ablate(&args),
        Command::Report(args) => run::report(&args),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
