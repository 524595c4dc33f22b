//! Batch runner for stoflow experiments.
//!
//! Every subcommand reads an [`config::ExperimentConfig`], runs one
//! experiment and writes `<sub>-<hash12>-seed<seed>.{csv,summary.txt,meta.json}`
//! into the output directory. Exit codes: 0 success, 1 probe failure or
//! numerical error, 2 configuration error.

pub mod commands;
pub mod config;
pub mod output;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use stoflow_core::{Error, FlowDirection};

#[derive(Debug, Parser)]
#[command(name = "stoflow", version, about = "Stochastic flows of reversible diffusions: batch experiments", arg_required_else_help = true)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Experiment config (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed; overrides the config.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Output directory; overrides STOFLOW_OUT_DIR and the config.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum FlowArg {
    Forward,
    Sharp,
}

impl From<FlowArg> for FlowDirection {
    fn from(f: FlowArg) -> Self {
        match f {
            FlowArg::Forward => FlowDirection::Forward,
            FlowArg::Sharp => FlowDirection::Sharp,
        }
    }
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Check the standing assumptions of the model on sampled points.
    Validate,
    /// Sampled superharmonicity certificate and Rayleigh upper bound.
    Certify,
    /// Flow initial points and record the trajectory.
    Simulate,
    /// u-volume series, supermartingale probe or decay probe.
    Volume,
    /// Lyapunov rates, the clock and the invariant-measure bounds.
    Lyapunov,
    /// Recurrence/transience integral tests.
    Classify {
        /// Flow to classify; overrides the config.
        #[arg(long, value_enum)]
        flow: Option<FlowArg>,
    },
    /// Euler flow against the exact Ornstein–Uhlenbeck flow.
    OracleCompare,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Validate => "validate",
            Command::Certify => "certify",
            Command::Simulate => "simulate",
            Command::Volume => "volume",
            Command::Lyapunov => "lyapunov",
            Command::Classify { .. } => "classify",
            Command::OracleCompare => "oracle-compare",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CliError {
    /// Bad flags, config or model file; exit code 2.
    Config(String),
    /// Failure while running; exit code 1.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Parse { .. } | Error::InvalidInput(_) | Error::GridMismatch { .. } | Error::WindowTooShort { .. } => {
                CliError::Config(e.to_string())
            }
            other => CliError::Runtime(other.to_string()),
        }
    }
}

/// Parses `argv` (program name first), runs the subcommand and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = match cli.common.threads {
        Some(0) => Err(CliError::Config("--threads must be at least 1".into())),
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| commands::execute(&cli)),
            Err(e) => Err(CliError::Runtime(format!("cannot start thread pool: {e}"))),
        },
        None => commands::execute(&cli),
    };
    match result {
        Ok(outcome) => {
            print!("{}", outcome.summary);
            for p in &outcome.files {
                println!("wrote {}", p.display());
            }
            if outcome.passed {
                0
            } else {
                eprintln!("probe failed: {}", outcome.failure.as_deref().unwrap_or("see summary"));
                1
            }
        }
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
