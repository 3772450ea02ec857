//! `rpose`: generate synthetic pose data, train, evaluate, predict, inspect
//! models and check gradients.
//!
//! Every command writes `resolved.toml` next to its outputs; passing that
//! file back with `--config` repeats the run.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::fmt;

use clap::{Args, Parser, Subcommand};
use rpose_core::Error;

pub use commands::{cmd_eval, cmd_generate, cmd_gradcheck, cmd_inspect, cmd_predict, cmd_train};
pub use config::RunConfig;

pub const EXIT_FAILURE: i32 = 1;
/// Malformed configuration or invalid flag values.
pub const EXIT_CONFIG: i32 = 2;
/// A required input file (checkpoint, dataset) does not exist.
pub const EXIT_MISSING: i32 = 3;
/// The checkpoint does not fit the configured model or dataset.
pub const EXIT_INCOMPATIBLE: i32 = 4;
/// The output directory is not empty and `--force` was not given.
pub const EXIT_REFUSED: i32 = 5;

/// Error with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<rpose_tensor::TensorError> for CliError {
    fn from(e: rpose_tensor::TensorError) -> Self {
        Error::from(e).into()
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) => EXIT_CONFIG,
            Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => EXIT_MISSING,
            _ => EXIT_FAILURE,
        };
        Self::new(code, e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "rpose", version, about = "Recurrent heatmap pose estimation on synthetic or annotated images")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// Run configuration (TOML); flags override it.
    #[arg(long)]
    pub config: Option<std::path::PathBuf>,
    /// Seed for data generation and training.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<std::path::PathBuf>,
    /// Write into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render synthetic scenes with annotations.
    Generate(commands::GenerateArgs),
    /// Train a model and write checkpoints and the training log.
    Train(commands::TrainArgs),
    /// Score a checkpoint on an annotated dataset.
    Eval(commands::EvalArgs),
    /// Decode keypoints for images and optionally dump per-pass heatmaps.
    Predict(commands::PredictArgs),
    /// Print parameter counts and receptive fields.
    Inspect(commands::InspectArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(commands::GradcheckArgs),
}

pub fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Generate(a) => cmd_generate(&a).map(|_| ()),
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Eval(a) => cmd_eval(&a).map(|_| ()),
        Command::Predict(a) => cmd_predict(&a).map(|_| ()),
        Command::Inspect(a) => cmd_inspect(&a).map(|text| print!("{text}")),
        Command::Gradcheck(a) => cmd_gradcheck(&a).map(|_| ()),
    }
}

/// Parses `args` (including the program name), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}
