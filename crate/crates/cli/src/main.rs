//! `lsccal`: phantom generation, segmentation, training, calibration and
//! evaluation from the command line.

mod commands;
mod config;
mod pose;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "lsccal", version, about = "Lateral semicircular canal segmentation and calibration")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for phantom noise, sampling and initialization.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic two-canal phantom.
    Phantom(PhantomArgs),
    /// Segment canals with an intensity band.
    SegmentThreshold(SegmentArgs),
    /// Train the segmentation network on phantom directories.
    Train(TrainArgs),
    /// Segment a volume with a trained checkpoint.
    Infer(InferArgs),
    /// Calibrate a volume from its canal mask.
    Calibrate(CalibrateArgs),
    /// Compare masks, or run the seeded phantom batch with `--batch`.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    /// Output directory.
    #[arg(long)]
    pub output: PathBuf,
    /// Skew rotation as x,y,z Euler angles in degrees.
    #[arg(long, value_parser = parse_list::<3>, allow_hyphen_values = true)]
    pub skew_euler: Option<[f64; 3]>,
    /// Skew translation as x,y,z in millimeters.
    #[arg(long, value_parser = parse_list::<3>, allow_hyphen_values = true)]
    pub skew_translation: Option<[f64; 3]>,
    /// Additive noise amplitude.
    #[arg(long, conflicts_with = "noise_fraction")]
    pub noise: Option<f32>,
    /// Additive noise amplitude as a fraction of the intensity gap.
    #[arg(long)]
    pub noise_fraction: Option<f32>,
    /// Any phantom field as key=value.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    /// Input volume (.mvol).
    #[arg(long)]
    pub input: PathBuf,
    /// Output mask (.mvol).
    #[arg(long)]
    pub output: PathBuf,
    /// Lower intensity bound (inclusive).
    #[arg(long, allow_negative_numbers = true)]
    pub lo: Option<f32>,
    /// Upper intensity bound (inclusive).
    #[arg(long, allow_negative_numbers = true)]
    pub hi: Option<f32>,
    /// Take the band from a phantom spec.txt: canal intensity ± half the gap.
    #[arg(long, conflicts_with_all = ["lo", "hi"])]
    pub band_from_spec: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CeArg {
    Balanced,
    Strict,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Phantom directories holding volume.mvol and mask.mvol.
    #[arg(long, required = true, num_args = 1..)]
    pub input: Vec<PathBuf>,
    /// Output checkpoint.
    #[arg(long)]
    pub output: PathBuf,
    /// CSV loss log; defaults to the checkpoint path with a .csv extension.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Resume from a checkpoint instead of a fresh initialization.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Optimizer steps.
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Adam learning rate.
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Cuboids per step.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Aux-head loss weights λ1,λ2.
    #[arg(long, value_parser = parse_list::<2>)]
    pub lambda: Option<[f64; 2]>,
    /// Cross-entropy form.
    #[arg(long, value_enum)]
    pub ce: Option<CeArg>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// Input volume (.mvol).
    #[arg(long)]
    pub input: PathBuf,
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output mask (.mvol).
    #[arg(long)]
    pub output: PathBuf,
    /// Also write the averaged probability map.
    #[arg(long)]
    pub probabilities: Option<PathBuf>,
    /// Sliding-window stride in voxels.
    #[arg(long)]
    pub stride: Option<usize>,
    /// Foreground probability threshold.
    #[arg(long)]
    pub threshold: Option<f32>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// Input volume (.mvol).
    #[arg(long)]
    pub input: PathBuf,
    /// Canal mask (.mvol) on the volume's grid.
    #[arg(long)]
    pub mask: PathBuf,
    /// Output directory for volume.mvol, mask.mvol, pose.txt and report.json.
    #[arg(long)]
    pub output: PathBuf,
    /// Report path; defaults to report.json in the output directory.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Anchor refinement tolerance in mm.
    #[arg(long)]
    pub l0: Option<f64>,
    /// Maximum anchor refinement iterations.
    #[arg(long)]
    pub max_iter: Option<usize>,
    /// Output voxel spacing in mm.
    #[arg(long)]
    pub spacing: Option<f64>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SourceArg {
    Exact,
    Threshold,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Predicted mask (.mvol).
    #[arg(long, required_unless_present = "batch")]
    pub input: Option<PathBuf>,
    /// Ground-truth mask (.mvol).
    #[arg(long, required_unless_present = "batch")]
    pub truth: Option<PathBuf>,
    /// Calibration report whose rank is included.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Estimated world → calibrated pose file.
    #[arg(long, requires = "truth_pose")]
    pub pose: Option<PathBuf>,
    /// Ground-truth canonical → world pose file.
    #[arg(long, requires = "pose")]
    pub truth_pose: Option<PathBuf>,
    /// Metrics output; printed to stdout when absent.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Run the batch harness over this many seeded skewed phantoms.
    #[arg(long, conflicts_with_all = ["input", "truth"])]
    pub batch: Option<usize>,
    /// Largest Euler angle per axis in degrees.
    #[arg(long, default_value_t = 15.0)]
    pub max_skew: f64,
    /// Largest translation per axis in mm.
    #[arg(long, default_value_t = 2.0)]
    pub max_translation: f64,
    /// Noise amplitude as a fraction of the intensity gap.
    #[arg(long, default_value_t = 0.0)]
    pub noise_fraction: f32,
    /// Mask fed to calibration: ground truth or threshold segmentation.
    #[arg(long, value_enum, default_value_t = SourceArg::Exact)]
    pub source: SourceArg,
    #[command(flatten)]
    pub common: Common,
}

/// Parses exactly `N` comma-separated numbers.
fn parse_list<const N: usize>(text: &str) -> Result<[f64; N], String> {
    let values = text
        .split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|e| format!("'{v}': {e}")))
        .collect::<Result<Vec<_>, _>>()?;
    values.try_into().map_err(|v: Vec<f64>| format!("expected {N} comma-separated values, got {}", v.len()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
