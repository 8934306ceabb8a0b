//! `mfflow`: command-line front end for the density-flow solvers and the
//! value-function checks.
//!
//! Exit codes: 0 success, 1 a check failed, 2 numerical failure, 3 bad
//! configuration or arguments.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mfflow_core::Error;

#[derive(Debug, Parser)]
#[command(name = "mfflow", version, about = "Mean-field density flows and master-equation checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Scenario config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,

    /// Overrides the scenario seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (all cores when absent).
    #[arg(long, global = true, env = "MF_THREADS")]
    threads: Option<usize>,

    /// Keep every R-th time slice in path and kernel output.
    #[arg(long, global = true)]
    snapshot_every: Option<usize>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Command {
    /// Solve the Fokker-Planck flow; writes density_path.csv, grid.csv, norm_report.csv.
    RunFp,
    /// Solve for the derivative kernel; writes kernel_norms.csv and kernel_final.csv.
    RunKernel,
    /// Estimate the value function and its derivatives; writes value_report.csv, dv_dmu.csv.
    RunValue,
    /// Run the master-equation, martingale, Itô and terminal checks; writes verify_summary.csv.
    Verify,
    /// Fit convergence rates; writes convergence_summary.csv and one table per target.
    Convergence,
}

/// Outcome of a command that ran to completion.
pub enum Outcome {
    Pass,
    CheckFailed,
}

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numerical { .. } | Error::DomainEscape { .. } | Error::UnsupportedOrder(_) => 2,
        Error::Config(_)
        | Error::InvalidArgument(_)
        | Error::Construction(_)
        | Error::UnsupportedModel(_) => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 3 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(3);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start thread pool: {e}");
            return ExitCode::from(3);
        }
    }
    let opts = commands::Options {
        config: cli.config,
        out: cli.out,
        seed: cli.seed,
        snapshot_every: cli.snapshot_every,
    };
    match commands::run(cli.command, &opts) {
        Ok(Outcome::Pass) => ExitCode::SUCCESS,
        Ok(Outcome::CheckFailed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
