use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mrp_cli::commands::{self, Mode};
use mrp_cli::{CliError, ExperimentConfig};

#[derive(Parser)]
#[command(
    name = "mrp",
    about = "Pose adaptation experiments on procedural toy domains"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the train and eval datasets of a config.
    GenerateData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and write metrics, losses and checkpoints.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "pose")]
        mode: Mode,
    },
    /// Metrics of a checkpoint on a dataset directory, as JSON.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        fusion: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Entropy and pose-uncertainty histograms, as JSON.
    Histogram {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 20)]
        bins: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks of every layer and head.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: Option<PathBuf>, seed: Option<u64>) -> Result<ExperimentConfig, CliError> {
    let cfg = match path {
        Some(p) => ExperimentConfig::load(&p)?,
        None => ExperimentConfig::shipped(),
    };
    Ok(match seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn emit(text: &str, out: Option<PathBuf>) -> Result<(), CliError> {
    match out {
        Some(p) => std::fs::write(&p, text).map_err(|e| CliError::from_io(&p, e)),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenerateData { config, seed, out } => {
            commands::cmd_generate_data(&load_config(config, seed)?, &out)
        }
        Command::Train {
            config,
            seed,
            out,
            mode,
        } => {
            let outcome = commands::cmd_train(&load_config(config, seed)?, mode, &out)?;
            if let Some(last) = outcome.state.metrics.last() {
                eprintln!(
                    "iteration {}: target MPJPE {:.4}, OOD AUROC {:.3}",
                    last.iteration, last.target_mpjpe, last.ood_auroc
                );
            }
            Ok(())
        }
        Command::Evaluate {
            checkpoint,
            fusion,
            data,
            out,
        } => emit(
            &commands::cmd_evaluate(&checkpoint, fusion.as_deref(), &data)?,
            out,
        ),
        Command::Histogram {
            checkpoint,
            data,
            bins,
            out,
        } => emit(&commands::cmd_histogram(&checkpoint, &data, bins)?, out),
        Command::Gradcheck {
            config,
            seed,
            seeds,
            out,
        } => {
            let summary = commands::cmd_gradcheck(&load_config(config, seed)?, seeds)?;
            emit(
                &serde_json::to_string_pretty(&summary).expect("summary serialises"),
                out,
            )?;
            if summary.passed {
                Ok(())
            } else {
                Err(CliError::Invariant("gradient check failed".into()))
            }
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
