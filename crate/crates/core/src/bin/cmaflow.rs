use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cmaflow::harness::{emit_reports, run_experiment, ExperimentConfig, Pipeline};
use cmaflow::Error;

const EXIT_CHECK_FAILED: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_ABORT: u8 = 3;

#[derive(Parser)]
#[command(name = "cmaflow", version, about = "Complex Monge-Ampere flow solver and verification runs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output.dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed for randomized checks (overrides `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for cascade levels.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// One flow with monitors and oracle comparisons.
    Run,
    /// The approximation cascade and its ordering checks.
    Cascade,
    /// Spatial and temporal refinement studies.
    Converge,
    /// Property checks and exact-family runs.
    Verify,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let mut cfg = match &cli.config {
        Some(path) => match ExperimentConfig::from_file(path) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(EXIT_USAGE);
            }
        },
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = cli.out {
        cfg.output.dir = out;
    }
    let pipeline = match cli.command {
        Command::Run => Pipeline::Run,
        Command::Cascade => Pipeline::Cascade,
        Command::Converge => Pipeline::Converge,
        Command::Verify => Pipeline::Verify,
    };
    let bundle = match run_experiment(&cfg, pipeline, cli.jobs) {
        Ok(b) => b,
        Err(e @ (Error::Config(_) | Error::InvalidInput(_))) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_ABORT);
        }
    };
    if let Err(e) = emit_reports(&bundle, &cfg.output.dir, cfg.output.snapshots) {
        eprintln!("error: {e}");
        return ExitCode::from(EXIT_ABORT);
    }
    for c in &bundle.checks {
        let verdict = match (c.enforced, c.pass) {
            (true, true) => "PASS",
            (true, false) => "FAIL",
            (false, _) => "info",
        };
        match c.bound {
            Some(b) => println!("{verdict} {:<28} {:.6e} (bound {b:.6e})", c.name, c.measured),
            None => println!("{verdict} {:<28} {:.6e}", c.name, c.measured),
        }
    }
    if let Some(reason) = &bundle.abort {
        eprintln!("aborted: {reason}; partial results in {}", cfg.output.dir.display());
        return ExitCode::from(EXIT_ABORT);
    }
    if bundle.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_CHECK_FAILED)
    }
}
