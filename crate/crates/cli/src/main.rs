//! `refvos`: the command-line entry point.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure, 3 verification
//! failure.

mod commands;
mod plots;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "refvos", version, about = "Weakly-supervised referring video object segmentation on a synthetic world")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Seed; overrides the config file's seed where one applies.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (1 is fully deterministic and sequential).
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic train/test dataset and its manifest.
    Synth(SynthArgs),
    /// Re-augment every clip's expression set through chat and embedding services.
    Augment(AugmentArgs),
    /// Train a model; writes a checkpoint, metrics CSV and loss-curve SVG.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a split; writes eval.json and eval.csv.
    Eval(EvalArgs),
    /// Predict masks for one clip and expression.
    Infer(InferArgs),
    /// Check every loss gradient against central differences.
    Gradcheck(GradcheckArgs),
    /// Train the baseline and ablated variants and compare them.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// World spec (TOML); the built-in 16×16, C=64 world when omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, default_value_t = 300)]
    pub n_train: usize,
    #[arg(long, default_value_t = 50)]
    pub n_test: usize,
}

#[derive(Args, Debug)]
pub struct AugmentArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Chat service config (TOML); required unless --mock.
    #[arg(long)]
    pub chat_cfg: Option<PathBuf>,
    /// Embedding service config (TOML); required unless --mock.
    #[arg(long)]
    pub embed_cfg: Option<PathBuf>,
    /// Use the deterministic offline chat and embedding stand-ins.
    #[arg(long)]
    pub mock: bool,
    /// Positives per clip.
    #[arg(long, default_value_t = 6)]
    pub p: usize,
    /// Negatives per clip.
    #[arg(long, default_value_t = 48)]
    pub n: usize,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Training config (flat TOML); defaults for every omitted key.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Override one config key, e.g. `--set epochs=5` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Split used for per-epoch validation.
    #[arg(long, default_value = "test")]
    pub val_split: String,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// A clip JSONL file (as written by `synth`).
    #[arg(long)]
    pub clip: PathBuf,
    /// The referring expression.
    #[arg(long)]
    pub expression: String,
    /// Manifest whose world supplies the word codebook; the built-in world
    /// when omitted.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Print each frame's mask as a grid of `#` (object) and `.`.
    #[arg(long)]
    pub ascii: bool,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    /// Random instances per loss term.
    #[arg(long, default_value_t = 20)]
    pub instances: usize,
    /// Random instances for the whole-network check.
    #[arg(long, default_value_t = 3)]
    pub network_instances: usize,
    #[arg(long, hide = true)]
    pub inject_gradient_error: bool,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Comma-separated variant names; all of them when omitted.
    #[arg(long, value_delimiter = ',')]
    pub variants: Vec<String>,
    #[arg(long, default_value = "test")]
    pub val_split: String,
}

/// Why a command failed, and the exit code it maps to.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
    Verification(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Runtime(_) => 2,
            Failure::Verification(_) => 3,
        }
    }
}

impl From<refvos::Error> for Failure {
    fn from(e: refvos::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn command() -> clap::Command {
    let defaults = format!("Config keys and defaults:\n{}", refvos::trainer::TrainConfig::default().to_toml());
    Cli::command()
        .mut_subcommand("train", |c| c.after_long_help(defaults.clone()))
        .mut_subcommand("ablate", |c| c.after_long_help(defaults.clone()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match command().try_get_matches().and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match commands::run(&cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(f) => {
            let (Failure::Usage(m) | Failure::Runtime(m) | Failure::Verification(m)) = &f;
            eprintln!("error: {m}");
            ExitCode::from(f.code())
        }
    }
}
