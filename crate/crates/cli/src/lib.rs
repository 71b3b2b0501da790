//! Command-line driver: toy data generation, training, deraining and evaluation.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "derain", version, about = "Semi-supervised single-image deraining")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a toy paired corpus and, optionally, a pseudo-real unpaired set.
    GenToy(GenToyArgs),
    /// Train from a run config.
    Train(TrainArgs),
    /// Derain every image in a directory.
    Derain(DerainArgs),
    /// Score a checkpoint on a paired test set.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct GenToyArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Number of paired images.
    #[arg(long, default_value_t = 8)]
    pub count: usize,
    /// Side of the square images.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Also write pseudo-real rainy images with slanted streaks under `real/`.
    #[arg(long)]
    pub domain_gap: bool,
    /// Number of pseudo-real images; half of `--count` by default.
    #[arg(long)]
    pub real_count: Option<usize>,
    /// Streaks per image.
    #[arg(long)]
    pub streaks: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Ablation {
    NoPerceptual,
    NoTv,
    NoPairedDisc,
    NoUnsupervised,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML run config; defaults are used for anything missing.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub paired_root: Option<PathBuf>,
    #[arg(long)]
    pub unpaired_root: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub ablation: Vec<Ablation>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum GeneratorArg {
    #[default]
    Synthetic,
    Real,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long, required_unless_present = "identity")]
    pub checkpoint: Option<PathBuf>,
    /// Use a pass-through model instead of a checkpoint.
    #[arg(long)]
    pub identity: bool,
    #[arg(long, value_enum, default_value_t = GeneratorArg::Synthetic)]
    pub generator: GeneratorArg,
}

#[derive(Debug, Args)]
pub struct DerainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Paired test set with `rain/` and `clean/`.
    #[arg(long)]
    pub test_root: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
    /// Also write per-image metrics as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Also score the rainy inputs.
    #[arg(long)]
    pub with_baseline: bool,
    /// SSIM on luminance instead of the RGB average.
    #[arg(long)]
    pub luminance: bool,
}

/// Runs a parsed command; the value is the process exit code.
pub fn run(cli: Cli) -> anyhow::Result<i32> {
    match cli.command {
        Command::GenToy(a) => commands::gen_toy(&a).map(|_| 0),
        Command::Train(a) => commands::train(&a).map(|_| 0),
        Command::Derain(a) => commands::derain(&a),
        Command::Evaluate(a) => commands::evaluate(&a).map(|_| 0),
    }
}
