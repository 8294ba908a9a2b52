//! `bhreg`: Barnes-Hut tree registration toolkit.

mod commands;
mod error;
mod files;

use std::path::PathBuf;
use std::process::ExitCode;

use bhreg_core::training::Profile;
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

#[derive(Debug, Parser)]
#[command(name = "bhreg", version, about = "Barnes-Hut tree point cloud registration")]
pub struct Cli {
    /// Seed for every random draw.
    #[arg(long, global = true, env = "BHREG_SEED")]
    pub seed: Option<u64>,
    /// Scalar precision used for training.
    #[arg(long, global = true, env = "BHREG_PROFILE", value_parser = parse_profile)]
    pub profile: Option<Profile>,
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true, env = "BHREG_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

fn parse_profile(s: &str) -> Result<Profile, String> {
    s.parse().map_err(|e: bhreg_core::CoreError| e.to_string())
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a tree from an `.xyz` cloud and report its size.
    BuildTree(BuildTreeArgs),
    /// Estimate the motion mapping a source cloud onto a target cloud.
    Register(RegisterArgs),
    /// Train the registration network on synthetic pairs.
    Train(TrainArgs),
    /// Score a method on a pair set.
    Eval(EvalArgs),
    /// Positions of a probe point along a chain of relative motions.
    Trajectory(TrajectoryArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
    /// Time tree construction and network inference.
    Bench(BenchArgs),
    /// Write a synthetic pair set.
    MakeData(MakeDataArgs),
    /// Write one synthetic cloud with a given number of points.
    MakeCloud(MakeCloudArgs),
}

#[derive(Debug, Args)]
pub struct BuildTreeArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = bhreg_core::tree::DEFAULT_DEPTH)]
    pub depth: usize,
    /// Write one line per node to this file.
    #[arg(long)]
    pub dump: Option<PathBuf>,
    /// Map the cloud into [-1, 1]^3 before building.
    #[arg(long)]
    pub normalize: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Icp,
    ProcrustesGt,
    Rpsrnet,
    Identity,
}

#[derive(Debug, Args)]
pub struct RegisterArgs {
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long, value_enum, default_value = "icp")]
    pub method: Method,
    /// Network checkpoint for `rpsrnet`.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    pub passes: usize,
    #[arg(long, default_value_t = 50)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 1e-10)]
    pub tol: f64,
    /// Ground-truth motion file; adds the errors to the output row.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Write the estimate as a transform file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Override the configured epoch count.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Also save the state after the last epoch here.
    #[arg(long)]
    pub last: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Network checkpoint; required for `rpsrnet`.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Pair set written by `make-data`; defaults to the validation set of
    /// the checkpoint seed.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    pub passes: usize,
    #[arg(long, value_enum, default_value = "rpsrnet")]
    pub method: Method,
    #[arg(long, default_value_t = 50)]
    pub max_iters: usize,
}

#[derive(Debug, Args)]
pub struct TrajectoryArgs {
    /// Relative motions, one per line.
    #[arg(long)]
    pub input: PathBuf,
    /// Initial pose; identity when omitted.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "0,0,0")]
    pub probe: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Skip the network pipeline check.
    #[arg(long)]
    pub ops_only: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = bhreg_core::tree::DEFAULT_DEPTH)]
    pub depth: usize,
    #[arg(long, default_value_t = 20)]
    pub repeats: usize,
    /// Checkpoint for the inference timing; a freshly initialized network
    /// is used otherwise.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub skip_inference: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Args)]
pub struct MakeDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Number of pairs; the configured split size when omitted.
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long, value_enum, default_value = "val")]
    pub split: Split,
    #[arg(long, default_value_t = 30.0)]
    pub max_angle: f64,
    #[arg(long, default_value_t = 0.3)]
    pub max_translation: f64,
    #[arg(long, default_value_t = 0.05)]
    pub noise_level: f64,
}

#[derive(Debug, Args)]
pub struct MakeCloudArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub points: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    }
    info!("{cli:?}");
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
