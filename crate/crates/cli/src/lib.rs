//! The `latefuse` pipeline: one config file drives data generation,
//! preprocessing, per-branch training and prediction, offline fusion,
//! evaluation and timing.

pub mod commands;
pub mod config;
pub mod error;
pub mod runs;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use latefuse_core::dataset::Split;
use latefuse_core::model::Branch;

pub use config::{DataSource, ExperimentConfig};
pub use error::{CliError, Result};
pub use runs::{RunLock, RunManifest};

#[derive(Debug, Parser)]
#[command(name = "latefuse", version, about = "Late-fusion land-cover segmentation pipeline")]
pub struct Cli {
    /// Experiment TOML; the toy preset is used when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dotted-path override, e.g. `train.seed=7`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    /// Recompute outputs that already exist.
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BranchArg {
    Aerial,
    Temporal,
}

impl From<BranchArg> for Branch {
    fn from(b: BranchArg) -> Self {
        match b {
            BranchArg::Aerial => Branch::Aerial,
            BranchArg::Temporal => Branch::Temporal,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Synthesize the configured dataset, or check a given manifest.
    GenData,
    /// Cloud-filter and monthly-average every series; compute channel statistics.
    Preprocess,
    /// Train one branch and keep its best checkpoint.
    Train {
        #[arg(long, value_enum)]
        branch: BranchArg,
    },
    /// Write per-sample class probabilities for one branch.
    Predict {
        #[arg(long, value_enum)]
        branch: BranchArg,
        /// Defaults to `probs/<branch>.safetensors` in the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Fuse stored branch probabilities into fused probabilities and label rasters.
    Fuse,
    /// Score every stored probability file against the reference masks.
    Evaluate,
    /// Time both branches and their fusion on one batch.
    Benchmark {
        #[arg(long, default_value_t = 1)]
        warmup: usize,
        #[arg(long, default_value_t = 5)]
        reps: usize,
    },
    /// Collect metrics, timings and training curves into one markdown file.
    Report,
    /// Print the resolved configuration.
    ShowConfig,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Preprocess => "preprocess",
            Command::Train { .. } => "train",
            Command::Predict { .. } => "predict",
            Command::Fuse => "fuse",
            Command::Evaluate => "evaluate",
            Command::Benchmark { .. } => "benchmark",
            Command::Report => "report",
            Command::ShowConfig => "show-config",
        }
    }

    pub fn branch(&self) -> Option<Branch> {
        match self {
            Command::Train { branch } | Command::Predict { branch, .. } => Some((*branch).into()),
            _ => None,
        }
    }
}

/// Runs one subcommand and returns a human-readable summary.
pub fn run(cli: &Cli) -> Result<String> {
    let cfg = ExperimentConfig::load(cli.config.as_deref(), &cli.set)?;
    commands::execute(&cfg, &cli.command, cli.force)
}
