//! Command-line front end and HTTP service for the attribution engine.

pub mod commands;
pub mod config;
pub mod server;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;
use vade_core::VadeError;

#[derive(Error, Debug)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("data: {0}")]
    Data(String),
    #[error("numeric divergence: {0}")]
    Divergence(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Divergence(_) => 3,
        }
    }
}

impl From<VadeError> for CliError {
    fn from(e: VadeError) -> Self {
        if e.is_numeric_divergence() {
            CliError::Divergence(e.to_string())
        } else if matches!(
            e,
            VadeError::InvalidParam(_) | VadeError::TokenOutOfRange { .. }
        ) {
            CliError::Usage(e.to_string())
        } else {
            CliError::Data(e.to_string())
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "vade",
    version,
    about = "Diffusion counterfactuals and visual-attribution maps on chest phantoms"
)]
pub struct Cli {
    /// TOML or JSON configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output file or directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Args, Debug, Clone)]
pub struct CheckpointArg {
    /// Model checkpoint.
    #[arg(long, env = "VADE_CHECKPOINT")]
    pub checkpoint: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct GenerationArgs {
    /// Input image (PNG or PGM).
    #[arg(long)]
    pub input: PathBuf,
    /// Lesion mask for localization scoring.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Control image fed to the denoiser.
    #[arg(long)]
    pub control: Option<PathBuf>,
    #[arg(long)]
    pub prompt: Option<String>,
    #[arg(long)]
    pub strength: Option<f64>,
    #[arg(long)]
    pub guidance: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Run log; defaults to `runs.jsonl` in the output directory.
    #[arg(long)]
    pub run_log: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a phantom dataset with masks and a manifest.
    GenData {
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
    },
    /// Train the optional autoencoder on a dataset.
    TrainCodec {
        #[arg(long)]
        data: PathBuf,
    },
    /// Staged diffusion training; writes a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Trained codec to run diffusion in its latent space.
        #[arg(long)]
        codec: Option<PathBuf>,
    },
    /// Healthy counterfactual and attribution map for one image.
    Counterfactual {
        #[command(flatten)]
        ckpt: CheckpointArg,
        #[command(flatten)]
        gen: GenerationArgs,
    },
    /// Disease induction on a healthy image.
    Induce {
        #[command(flatten)]
        ckpt: CheckpointArg,
        #[command(flatten)]
        gen: GenerationArgs,
    },
    /// Re-run a logged generation and compare output hashes.
    Replay {
        #[command(flatten)]
        ckpt: CheckpointArg,
        #[arg(long)]
        run_log: PathBuf,
        #[arg(long)]
        id: u64,
    },
    /// Evaluation suite over a test manifest.
    Evaluate {
        #[command(flatten)]
        ckpt: CheckpointArg,
        #[arg(long)]
        data: PathBuf,
        /// Trained codec used as the feature extractor.
        #[arg(long)]
        feature_codec: Option<PathBuf>,
        #[arg(long)]
        max_per_class: Option<usize>,
    },
    /// Strength x guidance grid on one image.
    Sweep {
        #[command(flatten)]
        ckpt: CheckpointArg,
        #[command(flatten)]
        gen: GenerationArgs,
    },
    /// HTTP service over a checkpoint and a test manifest.
    Serve {
        #[command(flatten)]
        ckpt: CheckpointArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        port: Option<u16>,
        #[arg(long)]
        run_log: Option<PathBuf>,
    },
}

/// Parses arguments; help and version print and exit 0, other parse
/// failures exit 1.
pub fn main_with_args(args: impl IntoIterator<Item = String>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match commands::run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
