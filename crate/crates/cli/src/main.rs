mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hgcnet::blocks::Variant;

use crate::config::{Overrides, RunConfig};
use crate::error::{CliError, CliResult};

#[derive(Parser, Debug)]
#[command(
    name = "hgcnet",
    version,
    about = "Hierarchical group convolution networks: cost analysis, training and checks"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Flat `section.key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for initialization, shuffling and augmentation.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// 1x1 reduction variant: hgc, sgc or bottleneck.
    #[arg(long, global = true)]
    variant: Option<Variant>,
    /// Desk-scale profile: tiny network, 30 epochs, synthetic data.
    #[arg(long, global = true)]
    desk: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Per-layer and total parameter / FLOP report.
    Analyze {
        /// Also compare HGC and SGC over these group counts, e.g. 1,2,4,6.
        #[arg(long, value_delimiter = ',')]
        sweep_groups: Option<Vec<usize>>,
    },
    /// Train and write metrics plus a checkpoint after every epoch.
    Train {
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Top-1 error and loss on the validation / test split.
    Eval {
        /// Checkpoint to evaluate; a freshly initialized network otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Finite-difference check of every op, module and a small network.
    Gradcheck,
    /// Paired HGC vs SGC runs with identical seed and config.
    Ablate,
}

const DEFAULT_OUT: &str = "hgcnet-run";

fn existing(path: Option<PathBuf>) -> CliResult<Option<PathBuf>> {
    match path {
        Some(p) if !p.is_file() => Err(CliError::Config(format!("{} does not exist", p.display()))),
        other => Ok(other),
    }
}

fn run(cli: Cli) -> CliResult<()> {
    hgcnet::parallel::init_from_env();
    let c = &cli.common;
    let overrides = Overrides {
        seed: c.seed,
        variant: c.variant,
        desk: c.desk,
    };
    let out = c.out.clone();
    let default_out = || out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    match cli.command {
        Command::Gradcheck => {
            if let Some(path) = &c.config {
                RunConfig::load(Some(path), &overrides)?;
            }
            commands::gradcheck_cmd(c.seed.unwrap_or(0), out.as_deref())
        }
        cmd => {
            let cfg = RunConfig::load(c.config.as_deref(), &overrides)?;
            match cmd {
                Command::Analyze { sweep_groups } => {
                    commands::analyze_cmd(&cfg, sweep_groups.as_deref(), out.as_deref())
                }
                Command::Train { resume } => commands::train_cmd(&cfg, &default_out(), existing(resume)?.as_deref()),
                Command::Eval { checkpoint } => {
                    commands::eval_cmd(&cfg, existing(checkpoint)?.as_deref(), out.as_deref())
                }
                Command::Ablate => commands::ablate_cmd(&cfg, &default_out()),
                Command::Gradcheck => unreachable!(),
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
