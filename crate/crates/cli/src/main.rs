//! `subgoal`: generate datasets, run the selection CI tests, fit subtask
//! patterns, score segmentations and replay learned patterns.

mod commands;
mod config;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use subgoal_core::seqnmf::L1Gradient;

#[derive(Debug, Parser)]
#[command(name = "subgoal", version, about = "Subtask discovery from demonstrations")]
pub struct Cli {
    /// Random seed (overrides the config file; default 0).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// JSON file with `seed`, `dataset`, `seqnmf`, `ci`, `eval` and
    /// `execution` sections; flags take precedence over it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a dataset directory.
    Generate(GenerateArgs),
    /// Run the three conditional-independence checks under both protocols.
    Citest(CitestArgs),
    /// Fit subtask patterns to a dataset.
    Fit(FitArgs),
    /// Score predicted boundaries against the ground truth.
    Eval(EvalArgs),
    /// Drive both tasks by replaying a fitted driving model.
    Rollout(RolloutArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// color3-simple, color3-conditional, color10 or driving.
    pub generator: String,
    /// Sequences (color generators).
    #[arg(long)]
    pub n_seq: Option<usize>,
    /// Sequence length (color generators).
    #[arg(long)]
    pub t: Option<usize>,
    /// State noise standard deviation (color generators).
    #[arg(long)]
    pub noise_sd: Option<f64>,
    /// Trajectories per task (driving).
    #[arg(long)]
    pub n_per_task: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CitestArgs {
    pub dataset: PathBuf,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Mean p-value above which a condition counts as independent.
    #[arg(long)]
    pub independence_floor: Option<f64>,
    /// Random subsets in the multi-step protocol.
    #[arg(long)]
    pub subsets: Option<usize>,
    #[arg(long)]
    pub subset_fraction: Option<f64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum L1GradientArg {
    CrossFactor,
    Ones,
}

impl From<L1GradientArg> for L1Gradient {
    fn from(v: L1GradientArg) -> Self {
        match v {
            L1GradientArg::CrossFactor => L1Gradient::CrossFactor,
            L1GradientArg::Ones => L1Gradient::Ones,
        }
    }
}

#[derive(Debug, Args, Default)]
pub struct NmfArgs {
    /// Number of factors.
    #[arg(long)]
    pub j: Option<usize>,
    /// Pattern length in steps.
    #[arg(long)]
    pub l: Option<usize>,
    #[arg(long)]
    pub lambda_bin: Option<f64>,
    #[arg(long)]
    pub lambda_1: Option<f64>,
    #[arg(long)]
    pub lambda_sim: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    #[arg(long)]
    pub start_bin_loss_iter: Option<usize>,
    #[arg(long)]
    pub tolerance: Option<f64>,
    #[arg(long, value_enum)]
    pub l1_gradient: Option<L1GradientArg>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    pub dataset: PathBuf,
    #[command(flatten)]
    pub nmf: NmfArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    pub dataset: PathBuf,
    /// Evaluate an existing fit directory instead of fitting afresh.
    #[arg(long)]
    pub fit: Option<PathBuf>,
    /// Number of fits, seeded `seed, seed+1, ...`.
    #[arg(long)]
    pub seeds: Option<usize>,
    /// Matching tolerance in steps.
    #[arg(long)]
    pub tol: Option<usize>,
    /// Score the ground-truth boundaries against themselves.
    #[arg(long)]
    pub self_eval: bool,
    /// Dominance plots to write (one per trajectory, in dataset order).
    #[arg(long)]
    pub plots: Option<usize>,
    #[command(flatten)]
    pub nmf: NmfArgs,
}

#[derive(Debug, Args)]
pub struct RolloutArgs {
    /// Fit directory of a driving model.
    pub fit: PathBuf,
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Subtask termination radius in normalized state units.
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub max_subtask_steps: Option<usize>,
}

fn main() -> ExitCode {
    match commands::run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
