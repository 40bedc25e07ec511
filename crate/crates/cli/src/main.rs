//! `catair`: dataset synthesis, training, extension, evaluation, cost reports and inference.

mod commands;
mod run_config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "catair", version, about = "Content- and task-aware all-in-one image restoration")]
pub struct Cli {
    /// Run configuration file (TOML sections `[model]`, `[data]`, `[train]`, `[extend]`, `[eval]`, `[flops]`).
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Seed for data synthesis, initialization and training; overrides the file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a paired dataset.
    Synth(SynthArgs),
    /// Train a model from scratch.
    Train(TrainArgs),
    /// Grow a checkpoint with new tasks and fine-tune it.
    Extend(ExtendArgs),
    /// Score a checkpoint on a dataset and print JSON.
    Eval(EvalArgs),
    /// Report FLOPs in closed form or by exact counting.
    Flops(FlopsArgs),
    /// Restore one image.
    Infer(InferArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory.
    pub out: PathBuf,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    /// Pairs for one task, `task=n`; repeatable, replaces the file's counts.
    #[arg(long = "count", value_name = "TASK=N")]
    pub counts: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TrainOverrides {
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub crop: Option<usize>,
    /// Disable the EMA shadow.
    #[arg(long)]
    pub no_ema: bool,
    /// Disable flip and rotation augmentation.
    #[arg(long)]
    pub no_augment: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by `synth`.
    pub data: PathBuf,
    /// Output directory for `raw/`, `ema/` and `metrics.jsonl`.
    pub out: PathBuf,
    #[command(flatten)]
    pub train: TrainOverrides,
}

#[derive(Debug, Args)]
pub struct ExtendArgs {
    /// Checkpoint to grow.
    pub base: PathBuf,
    /// Dataset covering old and new tasks.
    pub data: PathBuf,
    pub out: PathBuf,
    /// Task to add; repeatable, replaces the file's list.
    #[arg(long = "new-task", value_name = "TASK")]
    pub new_tasks: Vec<String>,
    #[command(flatten)]
    pub train: TrainOverrides,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    pub ckpt: PathBuf,
    pub data: PathBuf,
    /// Hard-patch ratio at inference.
    #[arg(long)]
    pub gamma: Option<f64>,
}

#[derive(Debug, Args)]
pub struct FlopsArgs {
    /// `formula` or `exact`.
    #[arg(long, default_value = "formula")]
    pub mode: String,
    /// `param=range` with param one of gamma, tau, q, c and range `a,b,c` or `start:end:step`.
    #[arg(long)]
    pub sweep: Option<String>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Count the architecture of this checkpoint; with `--data`, a gamma sweep adds a PSNR column.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long, requires = "ckpt")]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    pub ckpt: PathBuf,
    pub input: PathBuf,
    pub output: PathBuf,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Write one router mask PNG per spatial attention block into this directory.
    #[arg(long, value_name = "DIR")]
    pub dump_masks: Option<PathBuf>,
}

/// Exit status: 0 success, 1 usage error, 2 runtime failure.
pub enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<catair::Error> for Failure {
    fn from(e: catair::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
