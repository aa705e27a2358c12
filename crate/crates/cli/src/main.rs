//! `abfr`: atlas-free brain-function representation pipeline.
//!
//! Subcommands cover the full flow: synthetic data (`phantom`), anchor
//! selection (`anchors`), representation extraction (`represent`),
//! cross-validated training (`train`), checkpoint evaluation (`eval`), a
//! parameter/runtime table (`bench`), and NIfTI inspection (`nifti-info`).
//!
//! Exit codes: 0 on success, 1 when some subjects failed but the run
//! completed, 2 on configuration errors.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod data;
mod learn;
mod util;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Run(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Run(m) => write!(f, "error: {m}"),
        }
    }
}

#[derive(Parser)]
#[command(name = "abfr", version, about = "Atlas-free brain-function representation pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic rs-fMRI dataset with a planted class effect
    Phantom(PhantomArgs),
    /// Select anchor patches (random or grid) over a grey-matter mask
    Anchors(AnchorArgs),
    /// Extract patch-to-anchor FC representations for every subject
    Represent(RepresentArgs),
    /// Train the transformer classifier with stratified k-fold CV
    Train(TrainArgs),
    /// Evaluate a saved checkpoint on a representation set
    Eval(EvalArgs),
    /// Tabulate parameter counts and forward-pass time per block combo
    Bench(BenchArgs),
    /// Inspect a NIfTI-1 file (optionally convert it)
    NiftiInfo(NiftiInfoArgs),
}

#[derive(Args)]
pub struct PhantomArgs {
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub subjects: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Strength of the planted class-1 connectivity effect
    #[arg(long)]
    pub class_effect: Option<f64>,
    /// Cubic volume side length
    #[arg(long)]
    pub dims: Option<usize>,
    /// Time points per subject
    #[arg(long)]
    pub t: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub regions: Option<usize>,
    /// JSON config file supplying defaults for unset flags
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args)]
pub struct AnchorArgs {
    /// Grey-matter mask (.abfv, T=1)
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Number of anchors (random mode)
    #[arg(long)]
    pub count: Option<usize>,
    /// Patch side length
    #[arg(long)]
    pub size: Option<usize>,
    /// Minimum grey-matter voxels per anchor patch
    #[arg(long)]
    pub tau: Option<usize>,
    /// Grid stride (grid mode; defaults to the patch side)
    #[arg(long)]
    pub stride: Option<usize>,
    /// "random" or "grid"
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args)]
pub struct RepresentArgs {
    /// Phantom/dataset directory (labels.csv, mask.abfv, volumes)
    #[arg(long)]
    pub data: PathBuf,
    /// Anchor directory (anchors.json + anchors.abfl)
    #[arg(long)]
    pub anchors: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Patches sampled per iteration
    #[arg(long)]
    pub patches: Option<usize>,
    /// Comma-separated patch sides, one per iteration
    #[arg(long)]
    pub sizes: Option<String>,
    /// Minimum grey-matter voxels per sampled patch
    #[arg(long)]
    pub tau_sample: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (never affects the output)
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Representation directory from `represent`
    #[arg(long)]
    pub reps: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Encoder feed-forward block: mlp, efficient-kan, fast-kan, faster-kan, wav-kan, cheby-kan
    #[arg(long)]
    pub encoder: Option<String>,
    /// Classification head block (same choices)
    #[arg(long)]
    pub head: Option<String>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub keep_ratio: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub reps: PathBuf,
    /// Checkpoint file (.abfk)
    #[arg(long)]
    pub model: PathBuf,
    /// config.json written by `train` (defines the architecture)
    #[arg(long)]
    pub train_config: PathBuf,
    /// Output CSV (stdout if omitted)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct BenchArgs {
    /// Output CSV (stdout if omitted)
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub patches: Option<usize>,
    #[arg(long)]
    pub anchors: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct NiftiInfoArgs {
    #[arg(long)]
    pub file: PathBuf,
    /// Convert the payload to the raw volume format
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Phantom(a) => data::cmd_phantom(a),
        Cmd::Anchors(a) => data::cmd_anchors(a),
        Cmd::Represent(a) => data::cmd_represent(a),
        Cmd::Train(a) => learn::cmd_train(a),
        Cmd::Eval(a) => learn::cmd_eval(a),
        Cmd::Bench(a) => learn::cmd_bench(a),
        Cmd::NiftiInfo(a) => data::cmd_nifti_info(a),
    };
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(e @ CliError::Config(_)) => {
            eprintln!("{e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(1)
        }
    }
}
