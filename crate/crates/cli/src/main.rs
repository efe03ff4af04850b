use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use l2g_core::config::{Preset, RunConfig};
use l2g_core::{Error, ErrorClass};

mod commands;

#[derive(Parser)]
#[command(name = "l2g", version, about = "Unsupervised identity clustering and retrieval on synthetic multi-camera data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Configuration shared by every subcommand: preset, then file, then overrides.
#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// Base preset (desk or full).
    #[arg(long, default_value = "desk")]
    preset: String,
    /// TOML config file layered over the preset.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// `section.key=value` override, applied last. Repeatable.
    #[arg(long = "set", short = 's', value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Train on a dataset and write a checkpoint plus a per-epoch CSV.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, short)]
        data: PathBuf,
        /// Output directory (created if missing).
        #[arg(long, short)]
        out: PathBuf,
        /// Drop the in-batch contrast term.
        #[arg(long)]
        no_local: bool,
        /// Drop the probability distillation term.
        #[arg(long)]
        no_distill: bool,
        /// Contrast against cluster centroids instead of mined instances.
        #[arg(long)]
        no_mining: bool,
    },
    /// Cross-camera retrieval metrics for a checkpoint.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, short)]
        data: PathBuf,
        /// Seed of the query/gallery split (overrides eval.seed).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Cluster a checkpoint's embeddings of a dataset and score the result.
    Cluster {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, short)]
        data: PathBuf,
        /// Comma-separated eps values; one report row each. Defaults to train.dbscan.eps.
        #[arg(long, value_delimiter = ',')]
        eps: Vec<f64>,
    },
}

impl ConfigArgs {
    fn resolve(&self, extra: &[String]) -> l2g_core::Result<RunConfig> {
        let preset: Preset = self.preset.parse()?;
        let file = match &self.config {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|e| Error::Config {
                field: "--config".into(),
                reason: format!("{}: {e}", p.display()),
            })?),
            None => None,
        };
        let mut overrides = self.overrides.clone();
        overrides.extend_from_slice(extra);
        RunConfig::resolve(preset, file.as_deref(), &overrides)
    }
}

fn run(cli: Cli) -> l2g_core::Result<()> {
    match cli.command {
        Command::Gen { config, out } => commands::gen(&config.resolve(&[])?, &out),
        Command::Train {
            config,
            data,
            out,
            no_local,
            no_distill,
            no_mining,
        } => {
            let mut extra = Vec::new();
            if no_local {
                extra.push("train.loss.use_local=false".to_string());
            }
            if no_distill {
                extra.push("train.loss.use_distill=false".to_string());
            }
            if no_mining {
                extra.push("train.loss.mining=centroid".to_string());
            }
            commands::train(&config.resolve(&extra)?, &data, &out)
        }
        Command::Eval {
            config,
            checkpoint,
            data,
            seed,
        } => {
            let extra: Vec<String> = seed.map(|s| format!("eval.seed={s}")).into_iter().collect();
            commands::eval(&config.resolve(&extra)?, &checkpoint, &data)
        }
        Command::Cluster {
            config,
            checkpoint,
            data,
            eps,
        } => commands::cluster(&config.resolve(&[])?, &checkpoint, &data, &eps),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.class() {
        ErrorClass::Config => 2,
        ErrorClass::Data => 3,
        ErrorClass::Numerical => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
