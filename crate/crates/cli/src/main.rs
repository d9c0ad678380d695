//! `gaunet`: batch entry points for data synthesis, training, generation and evaluation.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gaunet_core::dataset::MAX_CLASSES;

#[derive(Parser)]
#[command(name = "gaunet", version, about = "Conditional adversarial image augmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic shape dataset as PNGs plus a manifest.
    SynthData(SynthArgs),
    /// Train generator and critic from a configuration file.
    Train(TrainArgs),
    /// Generate images of one class from a checkpoint.
    Generate(GenerateArgs),
    /// FID and conditional accuracy of generated images.
    Eval(EvalArgs),
    /// Downstream classification with and without generated images.
    Classify(ClassifyArgs),
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long, value_parser = clap::value_parser!(u64).range(2..=MAX_CLASSES as u64))]
    pub classes: u64,
    #[arg(long)]
    pub per_class: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Falls back to `GAU_SEED`, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
#[command(group = clap::ArgGroup::new("source").required(true).multiple(true).args(["config", "resume"]))]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Continue from a checkpoint; its embedded configuration is used unless `--config` is given.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Override `training.total_steps`. Batch-renorm limits are scheduled
    /// over the total, so extending a run is not the same as a longer run.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Stop after this many steps in this invocation, checkpointing first.
    #[arg(long)]
    pub max_steps: Option<u64>,
}

#[derive(Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub class: usize,
    #[arg(long, default_value_t = 64)]
    pub count: usize,
    /// Falls back to `GAU_SEED`, then the training seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
#[command(group = clap::ArgGroup::new("setup").required(true).multiple(true).args(["checkpoint", "config"]))]
pub struct EvalArgs {
    /// Generate from this checkpoint, or take the configuration from it when `--fake` is given.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory of real PNGs (defaults to the test split).
    #[arg(long, requires = "fake")]
    pub real: Option<PathBuf>,
    /// Directory of generated PNGs named `<class>_<index>.png`.
    #[arg(long)]
    pub fake: Option<PathBuf>,
    /// Images generated per class from the checkpoint.
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct ClassifyArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Generated training images per class.
    #[arg(long)]
    pub n_generated: Option<usize>,
    /// Keep only this many real training images per class.
    #[arg(long)]
    pub real_per_class: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::SynthData(a) => commands::synth_data(&a),
        Command::Train(a) => commands::train(&a),
        Command::Generate(a) => commands::generate(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Classify(a) => commands::classify(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
