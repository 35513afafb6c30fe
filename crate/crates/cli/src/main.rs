//! `robust-harvest`: assumption checks, threshold solves, HJB verification,
//! Monte Carlo payoff estimates and ambiguity sweeps from one TOML file.

mod commands;
mod config;
mod exit;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::SimulateOptions;
use crate::config::{MeasureKind, Overrides, RunConfig};
use crate::exit::{CliError, ExitKind};

#[derive(Parser, Debug)]
#[command(name = "robust-harvest", version, about = "Robust ergodic harvesting solver")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    #[arg(long, value_name = "PATH")]
    output_dir: Option<PathBuf>,
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Worker threads for path and sweep parallelism.
    #[arg(long, value_name = "N")]
    jobs: Option<usize>,
    /// Single ambiguity level; replaces `epsilon` and `eps_grid`.
    #[arg(long, value_name = "X", allow_negative_numbers = true)]
    eps: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check the model assumptions.
    Check(Common),
    /// Solve for the threshold and verify it.
    Solve(Common),
    /// Estimate the long-run payoff by simulation.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Fail unless the mean is consistent with the value.
        #[arg(long)]
        assert_value: bool,
        #[arg(long, value_enum)]
        measure: Option<MeasureKind>,
        /// Read the solution from disk instead of solving.
        #[arg(long)]
        no_inline_solve: bool,
    },
    /// Solve across a grid of ambiguity levels.
    Sweep(Common),
    /// Re-run the HJB verification on a persisted solution.
    Verify(Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Self::Check(c) | Self::Solve(c) | Self::Sweep(c) | Self::Verify(c) => c,
            Self::Simulate { common, .. } => common,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Self::Check(_) => "check",
            Self::Solve(_) => "solve",
            Self::Simulate { .. } => "simulate",
            Self::Sweep(_) => "sweep",
            Self::Verify(_) => "verify",
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let common = cli.command.common();
    if let Some(n) = common.jobs {
        if n == 0 {
            return Err(CliError::new(ExitKind::Usage, "--jobs must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::new(ExitKind::Internal, e.to_string()))?;
    }
    let measure = match &cli.command {
        Command::Simulate { measure, .. } => *measure,
        _ => None,
    };
    let overrides = Overrides { output_dir: common.output_dir.clone(), seed: common.seed, eps: common.eps, measure };
    let mut cfg = RunConfig::load(&common.config)?.resolve(&overrides)?;
    if let Command::Sweep(_) = cli.command {
        cfg.eps_grid = Some(cfg.eps_grid());
    }
    // Model errors surface before anything is written.
    cfg.model.build()?;
    cfg.solver.shooting()?;

    let dir = commands::prepare_output_dir(&cfg)?;
    commands::write_resolved(&dir, &cfg)?;
    let outcome = match &cli.command {
        Command::Check(_) => commands::check(&cfg),
        Command::Solve(_) => commands::solve(&cfg, &dir),
        Command::Simulate { assert_value, no_inline_solve, .. } => commands::simulate(
            &cfg,
            &dir,
            &SimulateOptions { assert_value: *assert_value, inline_solve: !*no_inline_solve },
        ),
        Command::Sweep(_) => commands::sweep_cmd(&cfg, &dir),
        Command::Verify(_) => commands::verify(&cfg, &dir),
    }?;
    commands::write_report(&dir, cli.command.name(), &cfg, &outcome.results)?;
    match outcome.failure {
        Some(f) => Err(f),
        None => Ok(()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(ExitKind::Usage.code()) } else { ExitCode::SUCCESS };
        }
    };
    match std::panic::catch_unwind(|| run(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
        Err(_) => ExitCode::from(ExitKind::Internal.code()),
    }
}
