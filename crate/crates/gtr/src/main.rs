use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gtr_mamba::commands::{self, Split};
use gtr_mamba::config::RunConfig;
use gtr_mamba::CliError;

#[derive(Debug, Parser)]
#[command(name = "gtr", version, about = "GTR-Mamba next-POI recommendation")]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `out_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Adds an ablation (repeatable).
    #[arg(long = "ablate", global = true, value_name = "NAME")]
    ablate: Vec<String>,
    /// Overrides one configuration key, e.g. `model.dim=32` (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse, filter, partition and split a check-in file.
    Ingest,
    /// Pretrain entity embeddings on the training split.
    Pretrain,
    /// Train the full model.
    Train {
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint on a split.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
    },
    /// Scene-switching analysis of a split.
    Scene {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        /// Keep every trajectory instead of balancing subset sizes.
        #[arg(long)]
        unbalanced: bool,
    },
    /// Export Poincaré-disk coordinates.
    Viz {
        /// Read tables from a checkpoint instead of the pretrained tables.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Time model components over sequence lengths and widths.
    Bench,
}

fn run(cli: Cli) -> Result<String, CliError> {
    let mut overrides = cli.set;
    if let Some(s) = cli.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(o) = &cli.out {
        overrides.push(format!("out_dir={}", toml::Value::String(o.display().to_string())));
    }
    let mut cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    cfg.ablate.extend(cli.ablate);
    cfg.validate()?;
    match cli.command {
        Command::Ingest => commands::cmd_ingest(&cfg),
        Command::Pretrain => commands::cmd_pretrain(&cfg),
        Command::Train { resume } => commands::cmd_train(&cfg, resume),
        Command::Eval { checkpoint, split } => commands::cmd_eval(&cfg, checkpoint.as_deref(), split),
        Command::Scene { checkpoint, split, unbalanced } => {
            commands::cmd_scene(&cfg, checkpoint.as_deref(), split, !unbalanced)
        }
        Command::Viz { checkpoint } => commands::cmd_viz(&cfg, checkpoint.as_deref()),
        Command::Bench => commands::cmd_bench(&cfg),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(msg) => {
            if !msg.is_empty() {
                println!("{msg}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
