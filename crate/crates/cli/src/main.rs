mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hbmc::perturb::PerturbMode;
use hbmc::simulators::Family;

use crate::config::RunConfig;

/// Amortized Bayesian model comparison for hierarchical models.
#[derive(Debug, Parser)]
#[command(name = "hbmc", version)]
struct Cli {
    /// JSON run configuration; flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for every random stream of the run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "HBMC_JOBS")]
    jobs: Option<usize>,
    /// Run directory for all outputs.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate datasets from one model family into a dataset store.
    Simulate(SimulateArgs),
    /// Train a network on the configured candidate models.
    Train(TrainArgs),
    /// Calibration and accuracy reports on fresh held-out simulations.
    Validate(ValidateArgs),
    /// Posterior model probabilities and Bayes factors for datasets.
    Compare(CompareArgs),
    /// Quadrature evidence for the hierarchical normal models.
    Oracle(OracleArgs),
    /// Robustness of a comparison under data perturbations.
    Perturb(PerturbArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub family: Family,
    #[arg(long)]
    pub count: usize,
    /// Groups per dataset (M).
    #[arg(long)]
    pub groups: usize,
    /// Observations per group (N).
    #[arg(long)]
    pub observations: usize,
    /// Label stored with every dataset, for later offline training.
    #[arg(long)]
    pub model_index: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Checkpoint to fine-tune from.
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
    /// Dataset stores for the offline regime; their datasets are pooled.
    #[arg(long, num_args = 1..)]
    pub store: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Held-out datasets per repetition.
    #[arg(long)]
    pub datasets: Option<usize>,
    #[arg(long)]
    pub repetitions: Option<usize>,
    /// Evaluate every configured (M, N) grid cell.
    #[arg(long)]
    pub grid: bool,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset files or store directories.
    #[arg(long, required = true, num_args = 1..)]
    pub data: Vec<PathBuf>,
    /// Model that Bayes factors are expressed against (defaults to the first).
    #[arg(long)]
    pub reference: Option<String>,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    /// Dataset files or store directories.
    #[arg(long, required = true, num_args = 1..)]
    pub data: Vec<PathBuf>,
    /// Network whose outputs are paired with the oracle in the scatter table.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PerturbArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// One dataset file.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub mode: ModeArg,
    #[arg(long, default_value_t = hbmc::perturb::DEFAULT_REPETITIONS)]
    pub repetitions: usize,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum ModeArg {
    BootstrapGroups,
    LeaveOneGroupOut,
    MaskSweep,
}

impl From<ModeArg> for PerturbMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::BootstrapGroups => PerturbMode::BootstrapGroups,
            ModeArg::LeaveOneGroupOut => PerturbMode::LeaveOneGroupOut,
            ModeArg::MaskSweep => PerturbMode::MaskSweep,
        }
    }
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate(_) => "simulate",
            Command::Train(_) => "train",
            Command::Validate(_) => "validate",
            Command::Compare(_) => "compare",
            Command::Oracle(_) => "oracle",
            Command::Perturb(_) => "perturb",
        }
    }
}

/// Exit status: 2 configuration, 3 numerical, 4 quadrature accuracy.
fn exit_code(err: &anyhow::Error) -> u8 {
    use hbmc::Error as E;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Accuracy { .. } => 4,
                E::NonFinite { .. } | E::NonFiniteLoss { .. } | E::Domain(_) | E::Simulation { .. } => 3,
                E::Shape(_) | E::Config(_) | E::Io(_) | E::Json(_) => 2,
            };
        }
    }
    2
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            anyhow::bail!(hbmc::Error::Config("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global()?;
    }
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    }
    .resolve(cli.seed)?;
    let out = cli
        .out
        .clone()
        .unwrap_or_else(|| cfg.out.join(&cfg.experiment).join(cli.command.name()));
    std::fs::create_dir_all(&out).map_err(hbmc::Error::Io)?;
    cfg.write(&out.join("config.json"))?;
    match cli.command {
        Command::Simulate(a) => commands::simulate(&cfg, &a, &out),
        Command::Train(a) => commands::train(&cfg, &a, &out),
        Command::Validate(a) => commands::validate(&cfg, &a, &out),
        Command::Compare(a) => commands::compare(&cfg, &a, &out),
        Command::Oracle(a) => commands::oracle(&cfg, &a, &out),
        Command::Perturb(a) => commands::perturb(&cfg, &a, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
