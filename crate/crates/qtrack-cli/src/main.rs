//! Command-line harness for control-landscape and tracking experiments.
//!
//! Subcommands:
//! - `run`      execute a configured experiment and persist its artifacts
//! - `validate` load a config, apply defaults, echo the resolved settings
//! - `compare`  tabulate several run reports into a comparison CSV
//!
//! Runs exit with 0 on convergence, 2 on a stall or exhausted budget, and
//! 3 when a tracking correlation matrix becomes singular in strict mode.

mod compare;
mod config;
mod runner;

use anyhow::Result;
use clap::{Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "qtrack", version, about = "Quantum-control landscape and tracking experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one configured experiment.
    Run {
        /// Path to the JSON run configuration.
        #[arg(long)]
        config: PathBuf,
        /// Output directory (defaults to the config's output_dir, else "runs/<stem>").
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the config's RNG seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Abort on ill-conditioned correlation matrices.
        #[arg(long)]
        strict: bool,
    },
    /// Validate a configuration and echo the resolved settings.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Compare run reports into a CSV table (stdout or --out).
    Compare {
        /// Paths to report.json files.
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Write the table to this file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() {
    let cli = Cli::parse();
    let code = match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    };
    std::process::exit(code);
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Run {
            config,
            out,
            seed,
            strict,
        } => {
            let mut cfg = config::load_config(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
                cfg.raw.seed = seed;
            }
            if strict {
                cfg.raw.options.strict = true;
            }
            let out_dir = out
                .or_else(|| cfg.raw.output_dir.as_ref().map(PathBuf::from))
                .unwrap_or_else(|| {
                    PathBuf::from("runs").join(
                        config
                            .file_stem()
                            .map(|s| s.to_string_lossy().into_owned())
                            .unwrap_or_else(|| "run".into()),
                    )
                });
            let outcome = runner::run(&cfg, &out_dir)?;
            println!(
                "{}: phi {:.6} of {:.6}, {} steps, stop {}, artifacts in {}",
                cfg.raw.algorithm.as_str(),
                outcome.report.final_phi,
                outcome.report.phi_max,
                outcome.report.iterations,
                outcome.report.stop_reason,
                out_dir.display()
            );
            Ok(outcome.exit_code)
        }
        Command::Validate { config } => {
            let cfg = config::load_config(&config)?;
            let echo = serde_json::to_string_pretty(&cfg.raw)?;
            println!("{echo}");
            Ok(0)
        }
        Command::Compare { reports, out } => {
            let table = compare::compare(&reports)?;
            match out {
                Some(path) => std::fs::write(&path, table)?,
                None => print!("{table}"),
            }
            Ok(0)
        }
    }
}
