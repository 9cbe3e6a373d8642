//! Command-line front end for the dual-shot detector toolkit.
//!
//! Exit codes: 0 success, 1 failed check, 2 input error, 3 numeric failure.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "dualshot", version, about = "Dual-shot face detector experiments")]
pub struct Cli {
    /// Seed for every random draw; each command documents its default.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// `key = value` configuration file; explicit flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker thread cap (default: available parallelism).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Directory receiving outputs and the run manifest.
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Dump the anchor layout as CSV.
    Anchors(AnchorsArgs),
    /// Matched-anchor statistics after augmentation.
    MatchStats(MatchStatsArgs),
    /// Write augmented samples as PPM images with box sidecars.
    AugmentPreview(AugmentPreviewArgs),
    /// Compare tape gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Train the toy network on a synthetic corpus.
    TrainToy(TrainToyArgs),
    /// Run second-shot inference on PPM images.
    Predict(PredictArgs),
    /// Average precision of a detection file.
    Eval(EvalArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum ShotArg {
    First,
    Second,
    Both,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Width,
    Area,
}

#[derive(Args, Debug)]
pub struct AnchorsArgs {
    #[arg(long, default_value_t = 640)]
    pub input_size: usize,
    #[arg(long, value_enum, default_value_t = ShotArg::Both)]
    pub shot: ShotArg,
    #[arg(long, value_enum, default_value_t = ModeArg::Width)]
    pub mode: ModeArg,
}

/// Either a synthetic corpus or WIDER annotations with PPM images.
#[derive(Args, Debug)]
pub struct SourceArgs {
    /// Number of synthetic 640 px images (faces log-uniform in [8, 512]).
    #[arg(long, conflicts_with = "annotations")]
    pub synthetic: Option<usize>,
    /// WIDER-style annotation file.
    #[arg(long, requires = "images_dir")]
    pub annotations: Option<PathBuf>,
    /// Directory that annotation paths are relative to.
    #[arg(long)]
    pub images_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[group(id = "pipeline", multiple = false)]
pub struct PipelineArgs {
    /// Anchor-based sampling mixed with SSD-style augmentation (default).
    #[arg(long)]
    pub iam: bool,
    /// SSD-style augmentation only.
    #[arg(long)]
    pub traditional: bool,
}

#[derive(Args, Debug)]
pub struct MatchStatsArgs {
    #[command(flatten)]
    pub source: SourceArgs,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    /// Overrides the pipeline's threshold (0.4 IAM, 0.35 traditional).
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long, default_value_t = 640)]
    pub input_size: usize,
}

#[derive(Args, Debug)]
pub struct AugmentPreviewArgs {
    #[command(flatten)]
    pub source: SourceArgs,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    #[arg(long, default_value_t = 640)]
    pub input_size: usize,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, value_parser = ["fem", "loss", "net"])]
    pub target: String,
    /// Maximum relative error (defaults: 1e-4 fem and loss, 1e-3 net).
    #[arg(long)]
    pub tol: Option<f64>,
    /// Scale every backward contribution by 1.01 (negative control).
    #[arg(long)]
    pub corrupt_backward: bool,
}

#[derive(Args, Debug)]
pub struct TrainToyArgs {
    #[arg(long)]
    pub steps: Option<usize>,
    /// Checkpoint manifest path (default `<out-dir>/toy.ckpt`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// PPM image; repeatable. Keys in the output are the paths as given.
    #[arg(long)]
    pub image: Vec<PathBuf>,
    /// Predict every image listed here (paths relative to the file's directory).
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    /// Detection file (default `<out-dir>/detections.txt`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long)]
    pub detections: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub iou: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
