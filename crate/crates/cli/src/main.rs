//! `localtrans`: dataset generation, training, evaluation, alignment,
//! stitching and attention benchmarks.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
//! failure.

mod commands;
mod report;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use localtrans::alloc::TrackingAllocator;
use localtrans::Error;

#[global_allocator]
static ALLOC: TrackingAllocator = TrackingAllocator;

#[derive(Debug, thiserror::Error)]
pub enum Failure {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Data(_) => 3,
            Failure::Core(e) => match e {
                Error::InvalidArgument(_) | Error::Budget { .. } => 2,
                Error::Shape(_)
                | Error::Parse { .. }
                | Error::Invariant { .. }
                | Error::Io { .. } => 3,
                Error::NonFinite { .. }
                | Error::Diverged { .. }
                | Error::Degenerate(_)
                | Error::Cascade { .. } => 4,
            },
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "localtrans",
    version,
    about = "Multiscale local-transformer homography estimation"
)]
pub struct Cli {
    /// Flat `key = value` file supplying defaults for any option.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true, env = "LOCALTRANS_THREADS")]
    pub threads: Option<usize>,
    /// Run every parallel section on one thread in a fixed order.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic pair dataset.
    GenData(GenDataArgs),
    /// Train the cascade on a dataset.
    Train(TrainArgs),
    /// Corner error and photometric scores of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Align one unaligned image to a target.
    Align(AlignArgs),
    /// Stitch local high-resolution tiles onto a global view.
    Stitch(StitchArgs),
    /// Local versus global attention cost.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    /// Index of the first sample.
    #[arg(long)]
    pub first: Option<usize>,
    #[arg(long)]
    pub patch: Option<usize>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub margin: Option<usize>,
    /// Resolution gap between target and unaligned view: 1, 4 or 8.
    #[arg(long)]
    pub cross_res: Option<usize>,
    #[arg(long)]
    pub no_augment: bool,
    /// Directory of PPM/PGM source images instead of procedural ones.
    #[arg(long)]
    pub source: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Validation dataset; defaults to the first training samples.
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Output directory holding `latest/` and `best/` checkpoints.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Total optimizer steps, counted across resumed runs.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Train on the first N samples only.
    #[arg(long)]
    pub overfit: Option<usize>,
    #[arg(long)]
    pub resume: bool,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub levels: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
    /// raw, scaled or softmax.
    #[arg(long)]
    pub attention_norm: Option<String>,
    #[arg(long)]
    pub offset_scale: Option<f64>,
    /// Steps per reporting epoch; defaults to one pass over the data.
    #[arg(long)]
    pub epoch_steps: Option<u64>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub batch: Option<usize>,
}

#[derive(Args, Debug)]
pub struct AlignArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub target: Option<PathBuf>,
    #[arg(long)]
    pub unaligned: Option<PathBuf>,
    /// Receives homography.txt, warped.ppm and mosaic.ppm.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct StitchArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub global: Option<PathBuf>,
    /// Directory of `tile_<row>_<col>.ppm` files.
    #[arg(long)]
    pub locals: Option<PathBuf>,
    #[arg(long)]
    pub rows: Option<usize>,
    #[arg(long)]
    pub cols: Option<usize>,
    /// Upsampling factor from the global image to the canvas.
    #[arg(long)]
    pub scale: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Comma-separated `HxW` grids; defaults to the pyramid of a 128x128
    /// input.
    #[arg(long)]
    pub sizes: Option<String>,
    #[arg(long)]
    pub channels: Option<usize>,
    /// Window radius for explicit sizes.
    #[arg(long)]
    pub radius: Option<usize>,
    /// Pyramid depth when no sizes are given.
    #[arg(long)]
    pub levels: Option<usize>,
    /// Comma-separated subset of `local,global`.
    #[arg(long)]
    pub modes: Option<String>,
    /// Largest global attention map, in elements.
    #[arg(long)]
    pub budget: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
