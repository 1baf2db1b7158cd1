//! `nvar`: generate trajectories, fit and evaluate NVAR emulators, and run
//! the experiment harness.

mod commands;
mod manifest;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use commands::{EvaluateArgs, ExperimentArgs, GenerateArgs, TrainArgs};
use settings::ConfigFile;

#[derive(Debug, Parser)]
#[command(
    name = "nvar",
    version,
    about = "NVAR emulators for chaotic ODEs",
    args_override_self = true
)]
struct Cli {
    /// Output directory; also read from NVAR_OUTPUT_DIR.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Worker threads; also read from NVAR_JOBS.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Integrate a system and write a trajectory CSV, optionally with test segments.
    Generate(GenerateArgs),
    /// Fit (or derive) a readout from a training trajectory.
    Train(TrainArgs),
    /// Roll a readout out over test segments and write the predictions and a VPT table.
    Predict(EvaluateArgs),
    /// Roll a readout out over test segments and write a VPT table.
    Evaluate(EvaluateArgs),
    /// Run one of the studies: grid, crossval, bias, noise, skip, colpitts.
    Experiment(ExperimentArgs),
}

fn init_threads(jobs: Option<usize>) -> Result<()> {
    if let Some(n) = jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("cannot size the worker pool")?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<i32> {
    let out_dir = cli.out_dir.as_deref();
    match cli.command {
        Command::Generate(args) => {
            init_threads(settings::jobs(cli.jobs, &ConfigFile::default())?)?;
            commands::generate(args, out_dir)?;
        }
        Command::Train(args) => {
            init_threads(settings::jobs(cli.jobs, &ConfigFile::default())?)?;
            return commands::train(args, out_dir);
        }
        Command::Predict(args) => {
            init_threads(settings::jobs(cli.jobs, &ConfigFile::default())?)?;
            if args.predictions.is_none() {
                anyhow::bail!("predict needs --predictions <dir>; use evaluate for VPT only");
            }
            commands::evaluate(args, out_dir, "predict")?;
        }
        Command::Evaluate(args) => {
            init_threads(settings::jobs(cli.jobs, &ConfigFile::default())?)?;
            commands::evaluate(args, out_dir, "evaluate")?;
        }
        Command::Experiment(args) => {
            let file = ConfigFile::load(args.config.as_deref())?;
            init_threads(settings::jobs(cli.jobs, &file)?)?;
            let dir = settings::output_dir(out_dir, &file, "results");
            commands::experiment(args, file, &dir)?;
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(0) => ExitCode::SUCCESS,
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
