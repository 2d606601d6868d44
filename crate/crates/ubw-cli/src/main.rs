//! `ubw`: untargeted backdoor watermarking of image-classification datasets
//! and black-box dataset-ownership verification.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or config error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use commands::UsageError;
use ubw_core::verify::Scenario;

#[derive(Parser)]
#[command(name = "ubw", version, about = "Untargeted backdoor watermarking and dataset ownership verification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ScenarioArg {
    IndependentTrigger,
    IndependentModel,
    Malicious,
    Unknown,
}

impl From<ScenarioArg> for Scenario {
    fn from(s: ScenarioArg) -> Scenario {
        match s {
            ScenarioArg::IndependentTrigger => Scenario::IndependentTrigger,
            ScenarioArg::IndependentModel => Scenario::IndependentModel,
            ScenarioArg::Malicious => Scenario::Malicious,
            ScenarioArg::Unknown => Scenario::Unknown,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Watermark the configured dataset and write a poisoned container.
    Poison {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Container path (default: <out-dir>/poisoned.ubw).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model on a dataset container (or the benign config data).
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dataset container; omitted = train on the benign config data.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Checkpoint path (default: <out-dir>/checkpoint.json).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compute BA / ASR-A / ASR-C / D_p for a checkpoint and trigger.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Trigger as a JSON file.
        #[arg(long)]
        trigger_json: Option<PathBuf>,
        /// Read the trigger from a poisoned container's provenance.
        #[arg(long)]
        trigger_from: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Black-box ownership verification against a checkpoint or an
    /// external oracle process.
    Verify {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// External oracle command speaking the line-delimited JSON protocol.
        #[arg(long)]
        oracle_cmd: Option<String>,
        #[arg(long)]
        trigger_json: Option<PathBuf>,
        #[arg(long)]
        trigger_from: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "unknown")]
        scenario: ScenarioArg,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Sweep gamma or lambda, one fully seeded sub-run per grid point.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// e.g. gamma=0.01,0.05,0.1 or lambda=0,1,2
        #[arg(long)]
        sweep: String,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Fine-tune or prune a watermarked checkpoint and trace the metrics.
    Defend {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// fine-tune | prune
        #[arg(long)]
        kind: String,
        /// Benign data fraction (tuning set or pruning calibration set).
        #[arg(long, default_value_t = 0.1)]
        fraction: f64,
        #[arg(long, default_value_t = 100)]
        epochs: usize,
        #[arg(long, default_value_t = 0.1)]
        lr: f64,
        /// MLP only: how many leading linear layers to freeze.
        #[arg(long, default_value_t = 0)]
        frozen_prefix: usize,
        /// Pruning-rate grid step (grid = {0, step, 2*step, ...} below 1).
        #[arg(long, default_value_t = 0.02)]
        grid_step: f64,
        #[arg(long)]
        trigger_json: Option<PathBuf>,
        #[arg(long)]
        trigger_from: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Serve the oracle protocol for a checkpoint on stdin/stdout.
    Oracle {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Re-check the embedded config digests of a run directory.
    VerifyDigests {
        #[arg(long)]
        dir: PathBuf,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Poison {
            config,
            out_dir,
            out,
        } => commands::cmd_poison(&config, out_dir.as_deref(), out.as_deref()),
        Command::Train {
            config,
            dataset,
            out_dir,
            out,
        } => commands::cmd_train(&config, dataset.as_deref(), out_dir.as_deref(), out.as_deref()),
        Command::Evaluate {
            config,
            checkpoint,
            trigger_json,
            trigger_from,
            out_dir,
        } => commands::cmd_evaluate(
            &config,
            &checkpoint,
            trigger_json.as_deref(),
            trigger_from.as_deref(),
            out_dir.as_deref(),
        ),
        Command::Verify {
            config,
            checkpoint,
            oracle_cmd,
            trigger_json,
            trigger_from,
            scenario,
            out_dir,
        } => commands::cmd_verify(
            &config,
            checkpoint.as_deref(),
            oracle_cmd.as_deref(),
            trigger_json.as_deref(),
            trigger_from.as_deref(),
            scenario.into(),
            out_dir.as_deref(),
        ),
        Command::Ablate {
            config,
            sweep,
            out_dir,
        } => commands::cmd_ablate(&config, &sweep, out_dir.as_deref()),
        Command::Defend {
            config,
            checkpoint,
            kind,
            fraction,
            epochs,
            lr,
            frozen_prefix,
            grid_step,
            trigger_json,
            trigger_from,
            out_dir,
        } => commands::cmd_defend(
            &config,
            &checkpoint,
            &kind,
            fraction,
            epochs,
            lr,
            frozen_prefix,
            grid_step,
            trigger_json.as_deref(),
            trigger_from.as_deref(),
            out_dir.as_deref(),
        ),
        Command::Oracle { checkpoint } => commands::cmd_oracle(&checkpoint),
        Command::VerifyDigests { dir } => commands::cmd_verify_digests(&dir),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
