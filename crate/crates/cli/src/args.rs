use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use urbanform::dataset::{Split, WaterStyle};
use urbanform::metrics::FractalMode;

#[derive(Debug, Parser)]
#[command(
    name = "urbanform",
    version,
    about = "Train and evaluate conditional generators of urban built-up areas"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build or synthesize city datasets
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Train a generator with progressive growing
    Train(TrainArgs),
    /// Write thresholded city maps for one manifest split
    Generate(GenerateArgs),
    /// Score generated maps against their labels
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Subcommand)]
pub enum DatasetCommand {
    /// Clip, resize and filter exported rasters into a manifest
    Build(BuildArgs),
    /// Write synthetic cities and their manifest
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    /// Directory of exported `<city>[_<year>]_<channel>.urg` rasters
    #[arg(long, value_name = "DIR")]
    pub input: PathBuf,
    /// Manifest path; samples go to a `samples/` directory beside it
    #[arg(long, value_name = "MANIFEST")]
    pub out: PathBuf,
    /// Minimum built-up fraction for admission [default: 0.01]
    #[arg(long, value_name = "FRACTION")]
    pub threshold: Option<f64>,
    /// Number of cities held out for testing [default: 20]
    #[arg(long, value_name = "N")]
    pub test_count: Option<usize>,
    /// Seed of the train/test split [default: 0]
    #[arg(long, value_name = "S")]
    pub seed: Option<u64>,
    /// JSON run configuration
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of cities to generate
    #[arg(long, value_name = "N", default_value_t = 200)]
    pub count: usize,
    /// Side of each city in pixels (8, 16, 32 or 64)
    #[arg(long, value_name = "PIXELS", default_value_t = 32)]
    pub size: usize,
    /// Water layout: coast, river, none, or mixed (alternating river and coast)
    #[arg(long, value_name = "STYLE", default_value = "mixed")]
    pub water: WaterStyle,
    /// Base seed; city i uses a seed derived from it
    #[arg(long, value_name = "S", default_value_t = 0)]
    pub seed: u64,
    /// Number of cities held out for testing
    #[arg(long, value_name = "N", default_value_t = 20)]
    pub test_count: usize,
    /// Output directory
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Manifest of the training data
    #[arg(long, value_name = "MANIFEST")]
    pub manifest: PathBuf,
    /// JSON run configuration
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Output directory for checkpoints, the training log and the resolved config
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Disable the water constraint loss [default: enabled]
    #[arg(long)]
    pub no_geo: bool,
    /// Train with the pixel loss only, without a discriminator [default: adversarial]
    #[arg(long)]
    pub no_adversarial: bool,
    /// Spectrally normalize the discriminator kernels [default: off]
    #[arg(long, conflicts_with = "no_adversarial")]
    pub spectral_norm: bool,
    /// Replace nightlights with a constant population channel [default: off]
    #[arg(long)]
    pub physical_only: bool,
    /// Training seed [default: 0]
    #[arg(long, value_name = "S")]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Checkpoint written by `train`
    #[arg(long, value_name = "FILE")]
    pub ckpt: PathBuf,
    /// Manifest listing the cities to generate
    #[arg(long, value_name = "MANIFEST")]
    pub manifest: PathBuf,
    /// Manifest split to generate
    #[arg(long, value_name = "SPLIT", default_value = "test")]
    pub split: Split,
    /// Output directory for `.urg` maps and `.pgm` previews
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Directory of generated `<city>.urg` maps
    #[arg(long, value_name = "DIR")]
    pub generated: PathBuf,
    /// Manifest holding the label of every city
    #[arg(long, value_name = "MANIFEST")]
    pub manifest: PathBuf,
    /// Report CSV path; companion files are written beside it
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Manifest split to score
    #[arg(long, value_name = "SPLIT", default_value = "test")]
    pub split: Split,
    /// Pyramid depth of the SPM score [default: log2(side) - 2]
    #[arg(long, value_name = "L")]
    pub spm_levels: Option<usize>,
    /// Box-counting target: filled or boundary [default: filled]
    #[arg(long, value_name = "MODE")]
    pub fractal_mode: Option<FractalMode>,
    /// JSON run configuration
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
}
