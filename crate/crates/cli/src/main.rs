//! `roidet` command line: dataset generation, training, detection and
//! evaluation as reproducible runs. Every command resolves its
//! configuration (flags over config file over defaults), writes its
//! artifacts plus a manifest into the output directory, and is bit-stable
//! given the same flags and seed.
//!
//! Exit codes: 0 success, 1 validation error, 2 runtime failure.

mod commands;
mod manifest;
mod overlay;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "roidet", version, about = "Two-stage biometric-trait ROI detector")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-trait dataset with annotations.
    GenData(GenDataArgs),
    /// Train a detector with the alternating phase schedule.
    Train(TrainArgs),
    /// Run a trained detector over a dataset and write predictions.
    Detect(DetectArgs),
    /// Score predictions against ground truth: report and curves.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
pub struct GenDataArgs {
    /// Images per trait class (total is five times this).
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for annotations.txt and images/.
    #[arg(long)]
    out: PathBuf,
    /// Square image side in pixels.
    #[arg(long, default_value_t = 96)]
    size: usize,
    /// Draw each image side from LO,HI instead of --size.
    #[arg(long, value_name = "LO,HI")]
    var_size: Option<String>,
    #[arg(long, default_value_t = 0.06)]
    noise: f64,
    #[arg(long, default_value_t = 1.0)]
    position_jitter: f64,
    #[arg(long, default_value_t = 0.12)]
    scale_jitter: f64,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Annotation file of the training dataset.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for model.bin, train_report.csv and the manifest.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Subset of the schedule to run, e.g. "b,c,d,e" or "b".
    #[arg(long, default_value = "b,c,d,e")]
    phases: String,
    /// Full schedule override as phase:epochs:lr entries,
    /// e.g. "b:5:0.04,c:8:0.06".
    #[arg(long)]
    schedule: Option<String>,
    /// Config file with detector keys and train.* keys.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
pub struct DetectArgs {
    /// Trained model file.
    #[arg(long)]
    model: PathBuf,
    /// Annotation file naming the images to run on.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for predictions.txt and the manifest.
    #[arg(long)]
    out: PathBuf,
    /// Score threshold; defaults to the model config's value.
    #[arg(long)]
    threshold: Option<f64>,
    /// Also write per-image SVG overlays under overlays/.
    #[arg(long)]
    svg: bool,
}

#[derive(Args)]
pub struct EvaluateArgs {
    /// Prediction records (annotation grammar with scores).
    #[arg(long)]
    predictions: PathBuf,
    /// Ground-truth annotation file.
    #[arg(long)]
    truth: PathBuf,
    /// Output directory for report.csv, curves and the manifest.
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated IOU thresholds for the summary table.
    #[arg(long, default_value = "0.35,0.5,0.65")]
    thresholds: String,
}

/// Failures split by exit code.
pub enum CliError {
    /// Bad flags, config, or input files: exit 1.
    Usage(String),
    /// Failure during the run itself: exit 2.
    Runtime(String),
}

impl CliError {
    fn usage(e: impl std::fmt::Display) -> CliError {
        CliError::Usage(e.to_string())
    }

    fn runtime(e: impl std::fmt::Display) -> CliError {
        CliError::Runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::GenData(args) => commands::gen_data(args),
        Command::Train(args) => commands::train(args),
        Command::Detect(args) => commands::detect(args),
        Command::Evaluate(args) => commands::evaluate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
