//! The `morphnet` command-line tool.
//!
//! Exit codes: 0 on success, 1 when a check fails, 2 for usage or input
//! errors.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use config::{CurationOverrides, PathsConfig, RunConfig, ScalingOverrides, TrainingOverrides};

use crate::nn::HeadMode;
use crate::scaling::PRESET_NAMES;

/// Environment variable capping data-pipeline worker threads.
pub const THREADS_ENV: &str = "MORPHNET_THREADS";

#[derive(Debug, Parser)]
#[command(name = "morphnet", version, about = "Galaxy morphology classification with compound-scaled networks")]
pub struct Cli {
    /// Settings file; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Root seed for every random choice. Drawn at random and printed when
    /// not given.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Classify,
    Regress,
}

impl From<ModeArg> for HeadMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Classify => HeadMode::Classify,
            ModeArg::Regress => HeadMode::Regress,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

fn parse_variant(s: &str) -> Result<String, String> {
    if PRESET_NAMES.contains(&s) {
        Ok(s.to_string())
    } else {
        Err(format!("expected one of {}", PRESET_NAMES.join(", ")))
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Select clean samples from a vote-fraction catalog and split them.
    Curate(CurateArgs),
    /// Train a network on a manifest.
    Train(TrainArgs),
    /// Score a checkpoint on one split of a manifest.
    Eval(EvalArgs),
    /// Predict every image in a directory.
    Predict(PredictArgs),
    /// Show the architecture and FLOPS for scaling coefficients.
    ScaleInfo(ScaleInfoArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Render intermediate activations of one image.
    Featmap(FeatmapArgs),
    /// Write a procedurally generated labeled image set with a manifest.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct CurateArgs {
    #[arg(long)]
    pub catalog: Option<PathBuf>,
    #[arg(long)]
    pub out_manifest: Option<PathBuf>,
    /// Rule file replacing the built-in thresholds.
    #[arg(long)]
    pub rules: Option<PathBuf>,
    /// Class 6 qualifies on any single irregular answer instead of their sum.
    #[arg(long)]
    pub or_mode_class6: bool,
    /// Image file name per galaxy; `{id}` is replaced.
    #[arg(long)]
    pub image_pattern: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub image_dir: Option<PathBuf>,
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<String>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Vote-fraction catalog; required for regression targets.
    #[arg(long)]
    pub catalog: Option<PathBuf>,
    /// Directory for the best checkpoint and the history file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image_dir: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[arg(long)]
    pub catalog: Option<PathBuf>,
    /// Fail unless the checkpoint holds this variant.
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<String>,
    /// Also write the report as TOML.
    #[arg(long)]
    pub report_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub image_dir: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<String>,
}

#[derive(Debug, Args)]
pub struct ScaleInfoArgs {
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub phi: Option<f64>,
    /// Baseline to scale.
    #[arg(long, value_parser = parse_variant)]
    pub base: Option<String>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = crate::suite::SUITE_EPS)]
    pub eps: f64,
    #[arg(long, default_value_t = 100)]
    pub seeds: u64,
    #[arg(long, default_value_t = crate::suite::SUITE_TOLERANCE)]
    pub tolerance: f64,
}

#[derive(Debug, Args)]
pub struct FeatmapArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// Comma-separated layer names; four evenly spaced layers by default.
    #[arg(long, value_delimiter = ',')]
    pub layers: Vec<String>,
    #[arg(long, default_value = "featmaps")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub channels: usize,
    #[arg(long, default_value_t = 4)]
    pub columns: usize,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub count: usize,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
}

/// What went wrong, and so which exit code to use.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Input(crate::Error),
    CheckFailed(String),
}

impl From<crate::Error> for CliError {
    fn from(e: crate::Error) -> Self {
        CliError::Input(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::CheckFailed(_) => 1,
            CliError::Usage(_) | CliError::Input(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Input(e) => write!(f, "{e}"),
            CliError::CheckFailed(m) => write!(f, "check failed: {m}"),
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let seed = cli.seed.or(cfg.seed).unwrap_or_else(rand::random);
    eprintln!("morphnet: root seed {seed}");
    let ctx = commands::Context { cfg, seed };
    match cli.command {
        Command::Curate(a) => commands::curate(&ctx, a),
        Command::Train(a) => commands::train(&ctx, a),
        Command::Eval(a) => commands::eval(&ctx, a),
        Command::Predict(a) => commands::predict(&ctx, a),
        Command::ScaleInfo(a) => commands::scale_info(&ctx, a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Featmap(a) => commands::featmap(&ctx, a),
        Command::Synth(a) => commands::synth(&ctx, a),
    }
}

/// Parses the process arguments, runs, and maps the outcome to an exit code.
pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("morphnet: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
