//! `neurosc` command-line front end.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 numerical failure
//! (or a failing verify suite), 4 missed error budget.

mod commands;
mod config;
mod output;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use neurosc::error::Error;

use crate::output::Artifacts;

#[derive(Parser)]
#[command(name = "neurosc", version, about = "Neural oscillator simulation and operator compilation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (default: the config's `out`, else `out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run seed; overrides the config's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Also write SVG line charts.
    #[arg(long, global = true)]
    svg: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Drive a multi-layer oscillator with one input and write its states.
    Simulate,
    /// Calibrate sine-transform layers and check the transform identity.
    Transform,
    /// Build and validate a history reconstruction plan.
    Reconstruct,
    /// Compile a causal operator into a three-layer oscillator network.
    Compile,
    /// Compile a point function through ramp inputs.
    ApproxFn,
    /// Sweep the ordering parameter of a coupled-pendulum chain.
    FkSweep,
    /// Run property suites (`all`, or a comma-separated list) and print JSON.
    Verify { suite: String },
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Core(Error),
    Budget(String),
    Failed(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Budget(m) => write!(f, "budget missed at {m}"),
            CliError::Failed(m) => write!(f, "verification failed: {m}"),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Budget(_) => 4,
            CliError::Failed(_) => 3,
            CliError::Core(e) => match e {
                Error::InvalidParameter(_)
                | Error::DimensionMismatch(_)
                | Error::OperatorRejected(_)
                | Error::Io(_)
                | Error::Json(_)
                | Error::Csv(_) => 2,
                Error::Instability { .. } | Error::Singular(_) | Error::OutOfDomain { .. } => 3,
                Error::Unachievable { .. } | Error::BudgetMiss { .. } => 4,
            },
        }
    }

    /// Whether the artifacts gathered so far are still written.
    fn keeps_artifacts(&self) -> bool {
        matches!(self, CliError::Budget(_) | CliError::Failed(_))
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let raw = config::load(cli.config.as_deref())?;
    let resolved = config::resolve(raw, cli.seed, cli.out)?;
    let name = match &cli.command {
        Command::Simulate => "simulate",
        Command::Transform => "transform",
        Command::Reconstruct => "reconstruct",
        Command::Compile => "compile",
        Command::ApproxFn => "approx-fn",
        Command::FkSweep => "fk-sweep",
        Command::Verify { .. } => "verify",
    };
    let mut art = Artifacts::new(name, &resolved, cli.svg);
    let result = match &cli.command {
        Command::Simulate => commands::simulate(&resolved, &mut art),
        Command::Transform => commands::transform(&resolved, &mut art),
        Command::Reconstruct => commands::reconstruct(&resolved, &mut art),
        Command::Compile => commands::compile(&resolved, &mut art),
        Command::ApproxFn => commands::approx_fn(&resolved, &mut art),
        Command::FkSweep => commands::fk_sweep(&resolved, &mut art),
        Command::Verify { suite } => commands::verify(&resolved, &mut art, suite),
    };
    match result {
        Ok(()) => {
            art.write()?;
            eprintln!("[{name}] wrote {}", resolved.out.display());
            Ok(())
        }
        Err(e) if e.keeps_artifacts() => {
            art.write()?;
            Err(e)
        }
        Err(e) => Err(e),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("neurosc: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
