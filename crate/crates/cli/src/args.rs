use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "t1dtwin", version, about = "T1D digital twin: simulation, amortized inference and replay")]
pub struct Cli {
    /// Cap on worker threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Suppress progress output on stderr.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate one CGM trace for given parameters and scenario.
    Simulate(SimulateArgs),
    /// Generate a training dataset from the prior.
    Generate(GenerateArgs),
    /// Train the posterior flow on a dataset.
    Train(TrainArgs),
    /// Draw posterior samples for an observed CGM trace.
    Infer(InferArgs),
    /// Run a reference estimator.
    #[command(subcommand)]
    Baseline(BaselineCommand),
    /// Run an evaluation suite against a trained model.
    Evaluate(EvaluateArgs),
    /// Serve inference and what-if simulation over HTTP.
    Serve(ServeArgs),
}

/// Model setup files; each falls back to the built-in default.
#[derive(Debug, Clone, Default, Args)]
pub struct SetupArgs {
    #[arg(long)]
    pub prior: Option<PathBuf>,
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    #[arg(long)]
    pub constants: Option<PathBuf>,
    #[arg(long)]
    pub sensor: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub setup: SetupArgs,
    /// JSON with `theta` and optional `x0`; `x0` defaults to steady state.
    #[arg(long)]
    pub params: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub noiseless: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub setup: SetupArgs,
    /// Generation options JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 5000)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Training configuration JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// CGM CSV with a `t_min,value` header.
    #[arg(long)]
    pub cgm: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Refuse models trained on a different scenario.
    #[arg(long)]
    pub scenario_hash: Option<String>,
    #[arg(long)]
    pub obs_margin: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum BaselineCommand {
    /// Componentwise random-walk Metropolis over the physiological parameters.
    Mcmc(McmcArgs),
    /// Multi-start Nelder-Mead maximum a posteriori estimate.
    Map(MapArgs),
}

#[derive(Debug, Args)]
pub struct BaselineSetup {
    #[arg(long)]
    pub cgm: PathBuf,
    /// Take prior, scenario, constants and sensor from a trained model.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[command(flatten)]
    pub setup: SetupArgs,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct McmcArgs {
    #[command(flatten)]
    pub common: BaselineSetup,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub burn_in: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub time_limit: Option<f64>,
}

#[derive(Debug, Args)]
pub struct MapArgs {
    #[command(flatten)]
    pub common: BaselineSetup,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub restarts: Option<usize>,
    #[arg(long)]
    pub max_evals: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    Param,
    Replay,
    Timing,
    All,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long, value_enum)]
    pub suite: Suite,
    #[arg(long)]
    pub model: PathBuf,
    /// Evaluation configuration JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub cases: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub mcmc_burn_in: Option<usize>,
    #[arg(long)]
    pub mcmc_steps: Option<usize>,
    #[arg(long)]
    pub map_restarts: Option<usize>,
    #[arg(long)]
    pub replay_draws: Option<usize>,
    /// Training time in seconds; read from the model's timing sidecar when absent.
    #[arg(long)]
    pub training_time: Option<f64>,
    #[arg(long, default_value = "reports")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value_t = 30.0)]
    pub ttl_min: f64,
    /// Allowed browser origin; any origin when absent.
    #[arg(long)]
    pub cors_origin: Option<String>,
}
