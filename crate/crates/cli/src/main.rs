//! Command-line harness for the multimodal fusion workbench.
//!
//! Exit codes: 0 success, 1 assertion/tolerance failure, 2 configuration or
//! usage error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::export::ExportKind;

#[derive(Parser)]
#[command(name = "retfuse", version, about = "Multimodal retinal fusion workbench")]
struct Cli {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides both the dataset and training seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory (overrides the config's out_dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Suppress progress output.
    #[arg(long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train (single split or cross-validation) and write checkpoint,
    /// history CSV and metrics report.
    Train,
    /// Run an ablation plan against a shared dataset and emit a comparison
    /// table with deltas.
    Ablate {
        /// Ablation plan (JSON).
        #[arg(long)]
        plan: PathBuf,
    },
    /// Evaluate a trained checkpoint under input perturbations.
    Perturb {
        /// Checkpoint directory written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Verify gradients of every primitive, loss and the full pipeline.
    Gradcheck {
        /// Spatial and channel dims as H,W,C (each ≤ 8).
        #[arg(long, default_value = "4,4,4")]
        dims: String,
        /// Testing hook: adds a deliberately corrupted-gradient item.
        #[arg(long, hide = true)]
        inject_failure: bool,
    },
    /// Export attention maps, embedding projections, or perturbed SRFs.
    Export {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        what: ExportKind,
    },
    /// Materialize the synthetic dataset to disk.
    GenData,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(e.downcast_ref::<ConfigError>().map(|_| 2).unwrap_or(1))
        }
    }
}

/// Marker for failures that are configuration problems (exit 2) rather than
/// runtime/tolerance failures (exit 1).
#[derive(Debug)]
struct ConfigError(anyhow::Error);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

impl std::error::Error for ConfigError {}

fn need_config(cli: &Cli) -> anyhow::Result<config::ExperimentConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| anyhow::Error::new(ConfigError(anyhow::anyhow!("--config <path> is required"))))?;
    config::load_config(path, cli.seed, cli.out.as_deref())
        .map_err(|e| anyhow::Error::new(ConfigError(e)))
}

fn dispatch(cli: &Cli) -> anyhow::Result<bool> {
    match &cli.cmd {
        Command::Train => {
            let cfg = need_config(cli)?;
            commands::train::run(&cfg, cli.quiet)?;
            Ok(true)
        }
        Command::Ablate { plan } => {
            let cfg = need_config(cli)?;
            let plan = config::load_plan(plan).map_err(|e| anyhow::Error::new(ConfigError(e)))?;
            commands::ablate::run(&cfg, &plan, cli.quiet)?;
            Ok(true)
        }
        Command::Perturb { checkpoint } => {
            let cfg = need_config(cli)?;
            commands::perturb::run(&cfg, checkpoint, cli.quiet)?;
            Ok(true)
        }
        Command::Gradcheck { dims, inject_failure } => {
            commands::gradcheck::run(dims, *inject_failure, cli.quiet)
        }
        Command::Export { checkpoint, what } => {
            let cfg = need_config(cli)?;
            commands::export::run(&cfg, checkpoint.as_deref(), *what, cli.quiet)?;
            Ok(true)
        }
        Command::GenData => {
            let cfg = need_config(cli)?;
            commands::gendata::run(&cfg, cli.quiet)?;
            Ok(true)
        }
    }
}
