//! `nuigo`: synthesize → train → enhance → evaluate.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Retinal non-uniform illumination removal pipeline.
#[derive(Parser, Debug)]
#[command(name = "nuigo", version, about, long_about = None)]
pub struct Cli {
    /// Increase log verbosity (-v info, -vv debug, -vvv trace)
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    /// Only print errors
    #[arg(short, long, global = true, conflicts_with = "verbose")]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build degraded/clean training pairs from a directory of clean images
    Synthesize(SynthesizeArgs),
    /// Train the network on a synthesized dataset
    Train(TrainArgs),
    /// Enhance every image in a directory with a trained checkpoint
    Enhance(EnhanceArgs),
    /// Score predictions against references with PSNR and SSIM
    Evaluate(EvaluateArgs),
}

#[derive(Args, Debug)]
pub struct SynthesizeArgs {
    /// Directory of clean PNG/JPEG images
    #[arg(long)]
    pub input: PathBuf,
    /// Output directory for clean/, degraded/ and manifest.csv
    #[arg(long)]
    pub output: PathBuf,
    /// TOML file with synthesis settings; flags override its values
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Lightness thresholds, comma separated
    #[arg(long, value_delimiter = ',')]
    pub thresholds: Option<Vec<f64>>,
    /// Random seed for gamma sampling
    #[arg(long)]
    pub seed: Option<u64>,
    /// Lower end of the gamma range
    #[arg(long)]
    pub gamma_min: Option<f64>,
    /// Upper end of the gamma range
    #[arg(long)]
    pub gamma_max: Option<f64>,
    /// Exponent convention for dark regions
    #[arg(long, value_enum)]
    pub gamma_convention: Option<commands::GammaArg>,
    /// Square side clean images are resized to
    #[arg(long)]
    pub image_size: Option<usize>,
    /// Also write the illumination masks as 16-bit PNG
    #[arg(long)]
    pub save_masks: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// manifest.csv produced by `synthesize`
    #[arg(long)]
    pub manifest: PathBuf,
    /// VGG-style feature extractor weights (safetensors)
    #[arg(long)]
    pub extractor_weights: PathBuf,
    /// Directory for checkpoints, the training log and the effective config
    #[arg(long)]
    pub output: PathBuf,
    /// TOML file with training settings; flags override its values
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Continue from this checkpoint (weights, optimizer state and step)
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Random seed for initialization, splitting and shuffling
    #[arg(long)]
    pub seed: Option<u64>,
    /// Stop after this many optimizer steps
    #[arg(long)]
    pub max_steps: Option<u64>,
    /// Number of passes over the training split
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Pairs per mini-batch
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Adam learning rate
    #[arg(long)]
    pub lr: Option<f64>,
    /// Weight of the final-stage L1 term
    #[arg(long)]
    pub lambda_l1: Option<f64>,
    /// Gaussian standard deviation for kernel initialization
    #[arg(long)]
    pub init_std: Option<f64>,
    /// Epochs without validation improvement before stopping (0 disables)
    #[arg(long)]
    pub patience: Option<usize>,
    /// Fraction of clean images used for training
    #[arg(long)]
    pub train_fraction: Option<f64>,
    /// Steps between periodic checkpoints
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Number of recursive stages
    #[arg(long)]
    pub stages: Option<usize>,
    /// Feature channels per convolution
    #[arg(long)]
    pub channels: Option<usize>,
    /// Channels of the non-local embeddings
    #[arg(long)]
    pub inner_channels: Option<usize>,
    /// Give every stage its own weights
    #[arg(long)]
    pub untied: bool,
}

#[derive(Args, Debug)]
pub struct EnhanceArgs {
    /// Trained checkpoint
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Image file or directory of images
    #[arg(long)]
    pub input: PathBuf,
    /// Output directory
    #[arg(long)]
    pub output: PathBuf,
    /// Write every stage output as <name>_stage<k>.png instead of only the last
    #[arg(long)]
    pub all_stages: bool,
    /// Bits per channel of the written PNGs
    #[arg(long, default_value_t = 16, value_parser = parse_bit_depth)]
    pub bit_depth: u8,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Directory of predicted images
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory of reference images
    #[arg(long = "ref", value_name = "DIR")]
    pub reference: PathBuf,
    /// CSV report to write
    #[arg(long)]
    pub report: PathBuf,
    /// Manifest mapping degraded names to clean references
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

fn parse_bit_depth(s: &str) -> Result<u8, String> {
    match s {
        "8" => Ok(8),
        "16" => Ok(16),
        _ => Err(format!("bit depth must be 8 or 16, got {s}")),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage_error = e.use_stderr();
            let _ = e.print();
            return if usage_error {
                ExitCode::from(commands::EXIT_VALIDATION)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => log::LevelFilter::Error,
        (false, 0) => log::LevelFilter::Warn,
        (false, 1) => log::LevelFilter::Info,
        (false, 2) => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .init();

    let result = match cli.command {
        Command::Synthesize(a) => commands::synthesize(a),
        Command::Train(a) => commands::train(a),
        Command::Enhance(a) => commands::enhance(a),
        Command::Evaluate(a) => commands::evaluate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
