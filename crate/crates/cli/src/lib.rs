//! Command-line front end for `bnn-core`: data generation, training,
//! prediction reports, prior diagnostics and hybrid placement sweeps.
//!
//! Every command is a pure function of its flags, input files and seeds.
//! Structured output is written one JSON record per line.

use std::io::Write;
use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};

use bnn_core::{IntervalMethod, Optimizer, PosteriorFamily, Synthetic, Task, TrainConfig};

pub mod commands;

pub use commands::{
    evaluate, prepare_split, sweep_positions, train_from_spec, Evaluation, PreparedData, SweepRow, SweepTable,
    TrainOutcome,
};

#[derive(Debug, Parser)]
#[command(name = "bnn", version, about = "Variational Bayesian neural networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic regression dataset as CSV.
    GenData(GenDataArgs),
    /// Train a model spec on a CSV dataset.
    Train(TrainArgs),
    /// Prediction report and calibration metrics from a checkpoint.
    Predict(PredictArgs),
    /// Excess kurtosis of prior pre-activations, per layer.
    DiagnosePrior(DiagnoseArgs),
    /// Train every single-variational-layer placement plus Case 1 and Case 2.
    SweepPosition(SweepArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value = "linear")]
    pub kind: Synthetic,
    #[arg(long, default_value_t = 512)]
    pub n: usize,
    #[arg(long, default_value_t = 3)]
    pub width: usize,
    /// Observation noise standard deviation.
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Data source and split shared by training-type commands.
#[derive(Clone, Debug, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "y")]
    pub target: String,
    #[arg(long, default_value = "regression")]
    pub task: Task,
    /// Fraction of rows used for training.
    #[arg(long, default_value_t = 0.8)]
    pub split: f64,
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
}

/// Optimization flags.
#[derive(Clone, Debug, Args)]
pub struct FitArgs {
    /// Seed of the training stream (shuffles and weight noise).
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Seed for parameter initialization; defaults to `--seed`.
    #[arg(long)]
    pub init_seed: Option<u64>,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.01)]
    pub learning_rate: f64,
    /// KL multiplier; defaults to 1 / training-set size.
    #[arg(long)]
    pub kl_weight: Option<f64>,
    #[arg(long, default_value_t = 1)]
    pub mc_samples: usize,
    /// Overrides the posterior family of every variational layer.
    #[arg(long)]
    pub posterior_family: Option<PosteriorFamily>,
    /// Use SGD with this momentum coefficient.
    #[arg(long)]
    pub momentum: Option<f64>,
    /// Clip the global gradient norm at this value.
    #[arg(long)]
    pub clip_norm: Option<f64>,
}

impl FitArgs {
    pub fn init_seed(&self) -> u64 {
        self.init_seed.unwrap_or(self.seed)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            optimizer: match self.momentum {
                Some(beta) => Optimizer::SgdMomentum { beta },
                None => Optimizer::Sgd,
            },
            kl_weight: self.kl_weight,
            mc_samples: self.mc_samples,
            clip_norm: self.clip_norm,
        }
    }
}

impl Default for FitArgs {
    fn default() -> Self {
        FitArgs {
            seed: 0,
            init_seed: None,
            epochs: 100,
            batch_size: 32,
            learning_rate: 0.01,
            kl_weight: None,
            mc_samples: 1,
            posterior_family: None,
            momentum: None,
            clip_norm: None,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub spec: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub fit: FitArgs,
    /// Checkpoint output path.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Per-epoch trace output path (JSON lines).
    #[arg(long)]
    pub trace: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Subset {
    All,
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Interval {
    Gaussian,
    EmpiricalQuantile,
}

impl From<Interval> for IntervalMethod {
    fn from(i: Interval) -> Self {
        match i {
            Interval::Gaussian => IntervalMethod::Gaussian,
            Interval::EmpiricalQuantile => IntervalMethod::EmpiricalQuantile,
        }
    }
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Rows to report on, using the split recorded in the checkpoint.
    #[arg(long, value_enum, default_value = "test")]
    pub subset: Subset,
    #[arg(long, default_value_t = 100)]
    pub n_samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "gaussian")]
    pub interval: Interval,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Write the metrics record here instead of after the report.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long, default_value_t = 100_000)]
    pub samples: usize,
    /// Number of layers to probe; defaults to all hidden layers.
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Probe with the zero vector instead of a fixed N(0, I) draw.
    #[arg(long)]
    pub zero_probe: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub spec: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub fit: FitArgs,
    /// Posterior samples per test prediction.
    #[arg(long, default_value_t = 100)]
    pub n_samples: usize,
    /// Run placements one after another instead of in parallel.
    #[arg(long)]
    pub sequential: bool,
}

/// Runs one parsed invocation, writing primary output to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::GenData(a) => commands::cmd_gen_data(&a, out),
        Command::Train(a) => commands::cmd_train(&a, out),
        Command::Predict(a) => commands::cmd_predict(&a, out),
        Command::DiagnosePrior(a) => commands::cmd_diagnose_prior(&a, out),
        Command::SweepPosition(a) => commands::cmd_sweep_position(&a, out),
    }
}
