#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::Overrides;

#[derive(Debug, Parser)]
#[command(name = "mfc", version, about = "Discrete-time mean-field control: simulate, solve, evaluate, verify")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides execution.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overrides execution.workers.
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Overrides execution.out.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Euler-Maruyama particle simulation under the configured policy.
    Simulate,
    /// Backward induction on the quantized finite model.
    SolveFinite,
    /// Value iteration on the quantized finite model.
    SolveDiscounted,
    /// Exact and Monte Carlo cost of a persisted policy.
    Evaluate,
    /// Runs a convergence experiment and writes its report.
    Experiment {
        /// strong_error, value_rate, chaos, n_particle_gap or discounted_rate.
        id: Option<String>,
    },
    /// Samples the model and checks the declared constants.
    ValidateModel,
}

#[derive(Debug)]
pub enum Failure {
    Config(String),
    Tolerance(String),
    Runtime(String),
    Library(mfc::Error),
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Tolerance(_) => 1,
            Failure::Config(_) => 2,
            Failure::Runtime(_) => 3,
            Failure::Library(e) if e.is_config() => 2,
            Failure::Library(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "configuration error (cli): {m}"),
            Failure::Tolerance(m) => write!(f, "tolerance check failed: {m}"),
            Failure::Runtime(m) => write!(f, "runtime error: {m}"),
            Failure::Library(e) => write!(f, "{e}"),
        }
    }
}

impl From<mfc::Error> for Failure {
    fn from(e: mfc::Error) -> Self {
        Failure::Library(e)
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let path = cli
        .config
        .ok_or_else(|| Failure::Config("--config PATH is required".into()))?;
    let cfg = config::load(&path)?;
    let flags = Overrides {
        seed: cli.seed,
        workers: cli.workers,
        out: cli.out,
    };
    let settings = cfg.settings(&flags)?;
    if let Some(w) = settings.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build_global()
            .map_err(|e| Failure::Runtime(format!("worker pool: {e}")))?;
    }
    let ctx = commands::Context::new(cfg, settings)?;
    match cli.command {
        Command::Simulate => commands::simulate(&ctx),
        Command::SolveFinite => commands::solve_finite(&ctx),
        Command::SolveDiscounted => commands::solve_discounted_cmd(&ctx),
        Command::Evaluate => commands::evaluate(&ctx),
        Command::Experiment { id } => commands::experiment(&ctx, id.as_deref()),
        Command::ValidateModel => commands::validate(&ctx),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}
