//! Command-line front end: `etl`, `train`, `distill`, `superres`, `eval` and
//! `gradcheck` over a single TOML configuration.

pub mod commands;
pub mod config;
pub mod store;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use config::Config;
use config::SamplerKind;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Core(#[from] cmsr_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use cmsr_core::Error as E;
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Core(e) => match e {
                E::Config(_) | E::Contract(_) | E::InvalidShape(_) => EXIT_USAGE,
                E::Numeric(_) => EXIT_NUMERIC,
                E::InsufficientData(_) | E::Checkpoint(_) | E::Io { .. } | E::Image { .. } => EXIT_DATA,
            },
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "cmsr", version, about = "Diffusion teacher, consistency distillation and few-step ×4 super-resolution")]
pub struct Cli {
    /// TOML configuration; unset keys take their documented defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Prepare a dataset split from a PNG directory or the texture generator.
    Etl(EtlArgs),
    /// Train the ε-prediction teacher.
    Train(TrainArgs),
    /// Distill a consistency student from a trained teacher.
    Distill(DistillArgs),
    /// Upscale one low-resolution PNG by 4 per axis.
    Superres(SuperresArgs),
    /// Score a checkpoint on the test split against the nearest-upsample baseline.
    Eval(EvalArgs),
    /// Finite-difference check of every primitive and the configured model.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Debug, Args)]
pub struct EtlArgs {
    /// Directory of PNG files; without it the texture generator is used.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "train")]
    pub split: SplitArg,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Total step budget (overrides `teacher.steps`).
    #[arg(long)]
    pub steps: Option<u64>,
    /// Continue from a teacher checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DistillArgs {
    /// Trained teacher checkpoint.
    #[arg(long)]
    pub teacher: PathBuf,
    /// Total step budget (overrides `distill.steps`).
    #[arg(long)]
    pub steps: Option<u64>,
    /// Continue from a student checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SuperresArgs {
    /// Low-resolution RGB PNG of side `data.image_size / 4`.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, value_enum)]
    pub sampler: Option<SamplerKind>,
    /// Consistency or DDIM steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// DDIM visits every `stride`-th timestep instead of `steps` even ones.
    #[arg(long, conflicts_with = "steps")]
    pub stride: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Inject {
    /// Score the references themselves as model output.
    Reference,
    /// Score the baseline as model output.
    Baseline,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint to sample from; not needed with `--inject`.
    #[arg(long, required_unless_present = "inject")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub sampler: Option<SamplerKind>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Replace model outputs to sanity-check the report.
    #[arg(long, value_enum)]
    pub inject: Option<Inject>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Probed coordinates per parameter tensor.
    #[arg(long, default_value_t = 3)]
    pub coords: usize,
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    let mut cfg = Config::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    match cli.command {
        Command::Etl(a) => commands::etl(&cfg, &a),
        Command::Train(a) => commands::train(&cfg, &a),
        Command::Distill(a) => commands::distill(&cfg, &a),
        Command::Superres(a) => commands::superres(&cfg, &a),
        Command::Eval(a) => commands::eval(&cfg, &a),
        Command::Gradcheck(a) => commands::gradcheck(&cfg, &a),
    }
}
