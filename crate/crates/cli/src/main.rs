#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Metriplectic conditional flow matching on the damped pendulum.
#[derive(Parser, Debug)]
#[command(name = "metriflow", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON file with settings; flags take precedence
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the pendulum dataset
    Gendata(commands::GendataArgs),
    /// Train a field by conditional flow matching
    Train(commands::TrainArgs),
    /// Roll out a checkpoint from the test initial conditions
    Rollout(commands::RolloutArgs),
    /// Check the conservation and dissipation guarantees
    Verify(commands::VerifyArgs),
    /// Aggregate metrics and draw plots from rollout directories
    Report(commands::ReportArgs),
}

fn init_threads() {
    if let Ok(v) = std::env::var("METRIFLOW_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    log::warn!("could not size thread pool: {e}");
                }
            }
            _ => log::warn!("ignoring METRIFLOW_THREADS={v}"),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    init_threads();
    let result = match cli.command {
        Command::Gendata(a) => commands::gendata(a),
        Command::Train(a) => commands::train(a),
        Command::Rollout(a) => commands::rollout(a),
        Command::Verify(a) => commands::verify(a),
        Command::Report(a) => commands::report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
