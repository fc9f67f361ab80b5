//! `craft`: run or validate experiment configs.
//!
//! Everything a run writes is a deterministic function of (config, seed);
//! the elapsed-time chatter on stdout is deliberately the only place timing
//! appears.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use craft_core::experiment::{load_config, resolve_output_dir, run_experiment, Mode};
use craft_core::CraftError;

#[derive(Parser)]
#[command(name = "craft", about = "Annealed flow transport experiments", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment config.
    Run {
        /// TOML experiment description.
        #[arg(long)]
        config: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's mode (train, deploy, pimh, gold_standard,
        /// calibrate).
        #[arg(long)]
        mode: Option<String>,
        /// Where to write artifacts (default: the config's output_dir, then
        /// $CRAFT_RUNS_DIR/<config>-<seed>, then runs/<config>-<seed>).
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Apply the config's [desk_scale] overlay (shrunken problem sizes).
        #[arg(long)]
        desk_scale: bool,
    },
    /// Check a config and report every problem found.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CraftError::InvalidConfig(problems)) => {
            eprintln!("invalid config:");
            for p in &problems {
                eprintln!("  - {p}");
            }
            ExitCode::FAILURE
        }
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CraftError> {
    match cli.command {
        Command::Validate { config } => {
            load_config(&config)?;
            println!("{}: ok", config.display());
            Ok(())
        }
        Command::Run {
            config: config_path,
            seed,
            mode,
            output_dir,
            desk_scale,
        } => {
            let mut config = load_config(&config_path)?;
            if desk_scale {
                config = config.desk_scaled()?;
            }
            if let Some(seed) = seed {
                config.seed = seed;
            }
            if let Some(mode) = mode {
                config.mode = mode.parse::<Mode>()?;
                config.validate()?;
            }
            let out = resolve_output_dir(output_dir.as_deref(), &config, &config_path);
            let base_dir = config_path.parent().unwrap_or_else(|| ".".as_ref());

            println!(
                "running {} (mode {}, seed {}) -> {}",
                config_path.display(),
                config.mode,
                config.seed,
                out.display()
            );
            let start = Instant::now();
            let artifacts = run_experiment(&config, base_dir, &out, |line| println!("{line}"))?;
            println!(
                "done in {:.1}s; summary at {}",
                start.elapsed().as_secs_f64(),
                artifacts.summary_path.display()
            );
            Ok(())
        }
    }
}
