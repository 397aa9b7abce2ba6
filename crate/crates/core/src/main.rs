use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sganlab::commands;
use sganlab::config::parse_config;

/// Stacked-GAN training and evaluation lab.
#[derive(Parser)]
#[command(name = "sganlab", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the bottom-up encoder-classifier.
    TrainEncoder {
        /// Path to a JSON run config, or a literal JSON document.
        #[arg(long)]
        config: String,
        /// Output directory override.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Master seed override (fans out to data/init/noise seeds).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the configured variant end to end (encoder reuse, per-stack
    /// independent phases, joint phase when the variant has one).
    Train {
        #[arg(long)]
        config: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Sample an image grid from a trained checkpoint.
    Sample {
        /// Checkpoint produced by `train` (resolved_config.json is read
        /// from its directory unless --config is given).
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<String>,
        /// "uniform" or a comma-separated class list cycled over the grid.
        #[arg(long, default_value = "uniform")]
        labels: String,
        #[arg(long, default_value_t = 64)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compute metrics (score, diversity, nn) for a trained checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<String>,
        /// Comma-separated subset of: score, diversity, nn.
        #[arg(long, default_value = "score,diversity")]
        metrics: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train several variants with a shared encoder and emit a comparison
    /// CSV (all six when --variants is omitted).
    Ablate {
        #[arg(long)]
        config: String,
        /// Comma-separated variant ids.
        #[arg(long, default_value = "")]
        variants: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// Config for checkpoint-consuming commands: --config wins, else the
/// resolved_config.json beside the checkpoint.
fn sibling_config(
    checkpoint: &std::path::Path,
    config: &Option<String>,
) -> sganlab::Result<sganlab::config::RunConfig> {
    match config {
        Some(c) => parse_config(c),
        None => {
            let sibling = checkpoint
                .parent()
                .map(|d| d.join("resolved_config.json"))
                .filter(|p| p.exists())
                .ok_or_else(|| {
                    sganlab::Error::Config(format!(
                        "no resolved_config.json next to {}; pass --config",
                        checkpoint.display()
                    ))
                })?;
            parse_config(sibling.to_str().expect("utf-8 path"))
        }
    }
}

fn run() -> sganlab::Result<()> {
    match Cli::parse().command {
        Command::TrainEncoder { config, out, seed } => {
            let cfg = commands::resolve_config(&config, out.as_deref(), seed)?;
            commands::cmd_train_encoder(&cfg)
        }
        Command::Train { config, out, seed } => {
            let cfg = commands::resolve_config(&config, out.as_deref(), seed)?;
            commands::cmd_train(&cfg)
        }
        Command::Sample {
            checkpoint,
            config,
            labels,
            count,
            seed,
            out,
        } => {
            let cfg = sibling_config(&checkpoint, &config)?;
            let out = out.unwrap_or_else(|| {
                checkpoint
                    .parent()
                    .unwrap_or_else(|| std::path::Path::new("."))
                    .to_path_buf()
            });
            commands::cmd_sample(&checkpoint, &cfg, &labels, count, seed, &out)
        }
        Command::Eval {
            checkpoint,
            config,
            metrics,
            out,
        } => {
            let cfg = sibling_config(&checkpoint, &config)?;
            let out = out.unwrap_or_else(|| {
                checkpoint
                    .parent()
                    .unwrap_or_else(|| std::path::Path::new("."))
                    .to_path_buf()
            });
            let names: Vec<String> = metrics
                .split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect();
            commands::cmd_eval(&checkpoint, &cfg, &names, &out)
        }
        Command::Ablate {
            config,
            variants,
            out,
            seed,
        } => {
            let cfg = commands::resolve_config(&config, out.as_deref(), seed)?;
            let list: Vec<String> = variants
                .split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect();
            commands::cmd_ablate(&cfg, &list)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
