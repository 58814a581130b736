//! The `disparity` command-line front end.

pub mod commands;
pub mod config;
pub mod scores;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::error::Result;

#[derive(Debug, Parser)]
#[command(
    name = "disparity",
    version,
    about = "Diffusion-disparity out-of-distribution detection toolkit"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the toy Gaussian-mixture benchmark.
    GenToy(GenToyArgs),
    /// Fit disparity-ensemble calibration statistics.
    Calibrate(CalibrateArgs),
    /// Score datasets with one or more detectors.
    Score(ScoreArgs),
    /// Compute FPR@95 and AUROC from score files.
    Eval(EvalArgs),
    /// Run an ablation grid on the toy benchmark.
    Ablate(AblateArgs),
    /// Print a saved evaluation as a table.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenToyArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Size of every split except the classifier training set.
    #[arg(long)]
    pub n: Option<usize>,
    /// Diffusion steps `T`.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub t_start: Option<usize>,
    /// `ddim` or `ancestral`.
    #[arg(long)]
    pub sampler: Option<String>,
    #[arg(long)]
    pub guidance_scale: Option<f64>,
    /// Reconstruct without class guidance.
    #[arg(long)]
    pub unconditional: bool,
    /// `text` or `binary-v1`.
    #[arg(long)]
    pub format: Option<String>,
}

/// Detector knobs shared by `calibrate` and `score`.
#[derive(Debug, Args, Default)]
pub struct DetectorFlags {
    #[arg(long)]
    pub lambda: Option<f64>,
    /// `none`, `react` or `vra`.
    #[arg(long)]
    pub rectify: Option<String>,
    /// `generation`, `input`, `both` or `none`.
    #[arg(long)]
    pub removal_target: Option<String>,
    #[arg(long)]
    pub c: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// `kl` or `kl-alt`.
    #[arg(long)]
    pub prob_metric: Option<String>,
    /// `l2` or `cos`.
    #[arg(long)]
    pub feat_metric: Option<String>,
    #[arg(long)]
    pub d3plus_lambda: Option<f64>,
    #[arg(long)]
    pub odin_temperature: Option<f64>,
    #[arg(long)]
    pub gradnorm_temperature: Option<f64>,
    /// `prediction-to-uniform` or `uniform-to-prediction`.
    #[arg(long)]
    pub gradnorm_orientation: Option<String>,
    #[arg(long)]
    pub knn_k: Option<usize>,
    #[arg(long)]
    pub vim_residual_dim: Option<usize>,
}

/// Where the head and reference datasets come from.
#[derive(Debug, Args, Default)]
pub struct InputFlags {
    /// Directory written by `gen-toy`; fills in every unset input below.
    #[arg(long)]
    pub benchmark: Option<PathBuf>,
    #[arg(long)]
    pub head: Option<PathBuf>,
    /// Manifest of the in-distribution calibration pairs.
    #[arg(long)]
    pub ind_calibration: Option<PathBuf>,
    /// Manifest of the feature bank.
    #[arg(long)]
    pub feature_bank: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// `d3` or `d3plus`.
    #[arg(long)]
    pub detector: Option<String>,
    #[command(flatten)]
    pub inputs: InputFlags,
    #[command(flatten)]
    pub detector_flags: DetectorFlags,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated detector names.
    #[arg(long, value_delimiter = ',')]
    pub detectors: Vec<String>,
    /// Manifest of a dataset to score; repeatable.
    #[arg(long = "dataset")]
    pub datasets: Vec<PathBuf>,
    /// Calibration file written by `calibrate`, used instead of refitting.
    #[arg(long)]
    pub calibration: Option<PathBuf>,
    #[command(flatten)]
    pub inputs: InputFlags,
    #[command(flatten)]
    pub detector_flags: DetectorFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Directory holding `*.scores.csv` files.
    #[arg(long)]
    pub scores: Option<PathBuf>,
    /// Dataset name treated as in-distribution; every other is OoD.
    #[arg(long)]
    pub ind_dataset: Option<String>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Size of every split except the classifier training set.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub lambda: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    pub steps: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    pub rectify: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    pub removal_target: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    pub conditional: Vec<bool>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Directory written by `eval` or `ablate`.
    #[arg(long)]
    pub from: PathBuf,
    /// `markdown` or `csv`.
    #[arg(long, default_value = "markdown")]
    pub format: String,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenToy(a) => commands::gen_toy(a),
        Command::Calibrate(a) => commands::calibrate(a),
        Command::Score(a) => commands::score(a),
        Command::Eval(a) => commands::eval(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::Report(a) => commands::report(a),
    }
}

/// Parses `args`, runs the command, and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
