use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use descent_core::experiment::commands::{cmd_gradcheck, cmd_ratio_report, cmd_sweep, cmd_train};
use descent_core::gradcheck::{registry, DEFAULT_INSTANCES};
use descent_core::Error;

/// Train and evaluate attention models under layerwise descent constraints.
#[derive(Parser)]
#[command(name = "descent", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured variants for each seed.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output root; defaults to `run.output_dir` of the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Train this seed only.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate checkpoints over the perturbation grid.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoints to evaluate; defaults to the config's own runs.
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare every gradient rule against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = DEFAULT_INSTANCES)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Summarize per-sample layerwise loss ratios of one checkpoint.
    RatioReport {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let mut stdout = io::stdout();
    let result = match cli.command {
        Command::Train { config, out, seed } => cmd_train(&config, out.as_deref(), seed, &mut stdout).map(|_| true),
        Command::Sweep {
            config,
            checkpoint,
            out,
            seed,
        } => cmd_sweep(&config, &checkpoint, out.as_deref(), seed, &mut stdout).map(|_| true),
        Command::Gradcheck { instances, seed } => cmd_gradcheck(&registry(), instances, seed, &mut stdout).map(|(ok, _)| ok),
        Command::RatioReport { config, checkpoint, out } => {
            cmd_ratio_report(&config, &checkpoint, out.as_deref(), &mut stdout).map(|_| true)
        }
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e @ Error::Config { .. }) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
