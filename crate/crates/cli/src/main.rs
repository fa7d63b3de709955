//! `textped`: train, sample and inspect the text-to-pedestrian model.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 bad config or input,
//! 3 training aborted on a non-finite loss.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use textped_core::{Error, Profile};

#[derive(Debug, Parser)]
#[command(name = "textped", version, about = "Text-conditioned pedestrian image generation")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML training config; flags below override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (default: `$TEXTPED_OUT/<command>`, else `runs/<command>`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Model dimensions preset; replaces any `[model]` table from the config.
    #[arg(long, global = true)]
    pub profile: Option<Profile>,
    /// Disable a component: no-hpd, no-visa or no-sca. Repeatable.
    #[arg(long = "ablate", global = true)]
    pub ablate: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pre-train the text encoder, then train the GAN.
    Train(TrainArgs),
    /// Sample images for each caption of a text file.
    Generate(GenerateArgs),
    /// Pose (and optionally inception) metrics over images or detections.
    Evaluate(EvaluateArgs),
    /// Dump the generator's word attention for one caption.
    InspectAttention(InspectArgs),
    /// Write the procedural colour-band dataset.
    MakeSynthetic(SyntheticArgs),
    /// Train the four ablation configurations side by side.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset manifest (JSON).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub pretrain_steps: Option<u64>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Continue from a checkpoint written with the same config.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// One caption per line; blank lines are skipped.
    #[arg(long)]
    pub captions: PathBuf,
    /// Samples per caption.
    #[arg(long, default_value_t = 1)]
    pub count: usize,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Directory of PNG images to run the detector on.
    #[arg(long, conflicts_with = "detections", required_unless_present = "detections")]
    pub images: Option<PathBuf>,
    /// Only use images whose file name contains this string.
    #[arg(long, requires = "images")]
    pub filter: Option<String>,
    /// Precomputed detections (JSON lines).
    #[arg(long)]
    pub detections: Option<PathBuf>,
    /// Keypoint detector for `--images`.
    #[arg(long, default_value = "synthetic")]
    pub detector: String,
    /// Class probabilities per image (JSON lines of arrays) for the inception score.
    #[arg(long)]
    pub class_probs: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub splits: usize,
    #[arg(long, default_value_t = textped_core::metrics::DEFAULT_B_MAX)]
    pub b_max: f64,
    /// Report path (default: `<out>/report.json`).
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub caption: String,
}

#[derive(Debug, Args)]
pub struct SyntheticArgs {
    #[arg(long, default_value_t = 64)]
    pub count: usize,
    /// Image side (default: the profile's final resolution).
    #[arg(long)]
    pub resolution: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub pretrain_steps: Option<u64>,
}

/// Exit status for a failed command.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config { .. } | Error::Input(_) | Error::Ingest(_) | Error::Checkpoint(_) => 2,
        Error::NonFiniteLoss { .. } => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
