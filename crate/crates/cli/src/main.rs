//! funavg: federated partial-label segmentation experiments.
//!
//! Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric
//! divergence, 5 io failure.

use clap::{Parser, Subcommand};
use funavg_cli::config::RunConfig;
use funavg_cli::error::{CliError, Result};
use funavg_cli::pipeline::{
    cmd_evaluate, cmd_generate, cmd_infer, cmd_infer_local, cmd_reproduce, cmd_train, TrainMode,
};
use funavg_core::infer::EnsembleMode;
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "funavg", version, about = "Federated uncertainty-weighted segmentation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset into <out>/dataset
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the [data] seed
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one mode on <out>/dataset
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// federated | centralized | local
        #[arg(long)]
        mode: String,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run inference over the test split
    Infer {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// vanilla | funavg | local
        #[arg(long)]
        mode: String,
        /// Checkpoint directory (default: <out>/train_federated)
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Split to infer on (only `test` is defined)
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Build the report CSVs from predictions in <out>
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full pipeline over the configured seed list
    Reproduce {
        #[arg(long)]
        config: PathBuf,
        /// Output root (default: [eval] output_dir)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run only this seed instead of the configured list
        #[arg(long)]
        seed: Option<u64>,
        /// Skip stages whose outputs are already current
        #[arg(long)]
        resume: bool,
    },
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Generate { config, out, seed } => {
            let cfg = RunConfig::load(&config)?;
            let seed = seed.unwrap_or(cfg.data.seed);
            cmd_generate(&cfg, &out, seed)
        }
        Command::Train { config, out, mode, seed } => {
            let cfg = RunConfig::load(&config)?;
            let mode: TrainMode = mode.parse().map_err(CliError::Config)?;
            let seed = seed.unwrap_or(cfg.data.seed);
            cmd_train(&cfg, &out, mode, seed)
        }
        Command::Infer { config, out, mode, checkpoint, split, seed } => {
            let cfg = RunConfig::load(&config)?;
            if split != "test" {
                return Err(CliError::Config(format!(
                    "unknown split '{split}' (only `test` exists)"
                )));
            }
            let seed = seed.unwrap_or(cfg.data.seed);
            match mode.as_str() {
                "vanilla" | "funavg" => {
                    let emode = if mode == "vanilla" {
                        EnsembleMode::Vanilla
                    } else {
                        EnsembleMode::FunAvg
                    };
                    let ckpt = checkpoint.unwrap_or_else(|| out.join("train_federated"));
                    cmd_infer(&cfg, &out, &ckpt, &[emode], seed)
                }
                "local" => cmd_infer_local(&cfg, &out),
                other => Err(CliError::Config(format!(
                    "unknown infer mode '{other}' (vanilla | funavg | local)"
                ))),
            }
        }
        Command::Evaluate { config, out } => {
            let cfg = RunConfig::load(&config)?;
            cmd_evaluate(&cfg, &out)
        }
        Command::Reproduce { config, out, seed, resume } => {
            let cfg = RunConfig::load(&config)?;
            let out = out.unwrap_or_else(|| cfg.eval.output_dir.clone());
            cmd_reproduce(&cfg, &out, resume, seed)
        }
    }
}

fn main() {
    match run() {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
