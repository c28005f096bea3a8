//! Command-line runner for the linear sweeps, the basis comparison, the
//! nonlinear feature-encoder sweep and the validation suite.
//!
//! Exit codes: 0 success, 1 validation failure or run error, 2 bad
//! configuration.

pub mod config;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use taskcomm::channel_eval::MIN_GAIN;
use taskcomm::neural::{
    self, Architecture, Checkpoint, MultiTaskNet, NonlinearModel, TrainOptions,
};
use taskcomm::validation::{self, Scale};
use taskcomm::{energy_sweep, write_csv, ChannelSet, McOptions, SweepInstance};

pub use config::{ExperimentConfig, Kind, Overrides};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Run(#[from] taskcomm::Error),
    #[error("validation failed for criteria {0:?}")]
    ValidationFailed(Vec<u8>),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Run(_) | CliError::ValidationFailed(_) => 1,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Run(e.into())
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "taskcomm",
    version,
    about = "Task-oriented analog broadcast encoder experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sum-MSE versus energy for the designed encoder, the reference and the baselines.
    LinearSweep(RunArgs),
    /// Sum-MSE versus energy for the SVD, Gram-Schmidt and natural bases.
    BasisCompare(RunArgs),
    /// Train the multi-task network and sweep the feature encoder.
    NonlinearSweep(RunArgs),
    /// Run the numerical check suite.
    Validate(RunArgs),
}

#[derive(Debug, Args, Default)]
pub struct RunArgs {
    /// JSON configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated, strictly increasing energies.
    #[arg(long, value_delimiter = ',')]
    pub energy_grid: Option<Vec<f64>>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Monte-Carlo trials (per sweep cell, or per test sample for the nonlinear sweep).
    #[arg(long)]
    pub trials: Option<usize>,
    /// Output CSV (stdout when absent; validate writes no CSV without it).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Validation at smoke-test scale.
    #[arg(long)]
    pub quick: bool,
}

impl Command {
    fn split(&self) -> (Kind, &RunArgs) {
        match self {
            Command::LinearSweep(a) => (Kind::LinearSweep, a),
            Command::BasisCompare(a) => (Kind::BasisCompare, a),
            Command::NonlinearSweep(a) => (Kind::NonlinearSweep, a),
            Command::Validate(a) => (Kind::Validate, a),
        }
    }
}

/// Configuration for a subcommand: file (if any), then flags, then defaults.
pub fn load_config(
    kind: Kind,
    args: &RunArgs,
    env_seed: Option<&str>,
) -> Result<ExperimentConfig, CliError> {
    let cfg = match &args.config {
        Some(path) => {
            let cfg = config::parse_file(path)?;
            if cfg.kind != kind {
                return Err(CliError::Config(format!(
                    "{}: kind {:?} does not match subcommand {:?}",
                    path.display(),
                    cfg.kind.name(),
                    kind.name()
                )));
            }
            cfg
        }
        None => ExperimentConfig::new(kind),
    };
    let overrides = Overrides {
        energy_grid: args.energy_grid.clone(),
        seed: args.seed,
        trials: args.trials,
        out: args.out.clone(),
        quick: args.quick,
    };
    config::resolve(cfg, &overrides, env_seed)
}

fn output(cfg: &ExperimentConfig) -> Result<Box<dyn Write>, CliError> {
    Ok(match &cfg.out {
        Some(path) => Box::new(std::io::BufWriter::new(std::fs::File::create(path)?)),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn linear(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let mut rows = Vec::new();
    for i in 0..cfg.instances {
        let seed = cfg.seed().wrapping_add(i as u64);
        let mut inst = SweepInstance::generate(cfg.dims, cfg.subspace_dim, seed)?;
        inst.channels = ChannelSet::random(
            cfg.dims.users,
            1.0,
            cfg.channel_seed().wrapping_add(i as u64),
            MIN_GAIN,
        )?;
        let mc = (cfg.mc_trials > 0).then_some(McOptions {
            trials: cfg.mc_trials,
            seed,
        });
        eprintln!(
            "instance {}/{} (seed {seed}, gains {:?})",
            i + 1,
            cfg.instances,
            inst.channels.gains
        );
        rows.extend(energy_sweep(
            &inst,
            cfg.energy_grid(),
            cfg.methods(),
            cfg.weight_mode,
            mc,
            &cfg.solver,
        )?);
    }
    write_csv(&rows, output(cfg)?)?;
    Ok(())
}

fn nonlinear(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let seed = cfg.seed();
    let n = &cfg.neural;
    let model = NonlinearModel::new(seed);
    let test = model.sample(n.test_samples, seed.wrapping_add(1))?;
    let (net, fs) = match &n.checkpoint {
        Some(path) => {
            eprintln!("loading {}", path.display());
            let cp = Checkpoint::from_json(&std::fs::read_to_string(path)?)?;
            match cp.feature_stats {
                Some(fs) => (cp.net, fs),
                None => {
                    let fs = neural::feature_stats(&cp.net, &model.sample(n.train_samples, seed)?)?;
                    (cp.net, fs)
                }
            }
        }
        None => {
            let train_set = model.sample(n.train_samples, seed)?;
            eprintln!(
                "training {} epochs on {} samples",
                n.epochs, n.train_samples
            );
            let opts = TrainOptions {
                epochs: n.epochs,
                batch: n.batch,
                lr: n.lr,
                seed,
                ..TrainOptions::default()
            };
            let net = MultiTaskNet::new(Architecture::STANDARD, seed)?;
            let (net, history) = neural::train(&net, &train_set, &opts)?;
            eprintln!(
                "final training loss {:.6}",
                history.last().copied().unwrap_or(f64::NAN)
            );
            let fs = neural::feature_stats(&net, &train_set)?;
            (net, fs)
        }
    };
    if let Some(path) = &n.save_checkpoint {
        let cp = Checkpoint {
            net: net.clone(),
            feature_stats: Some(fs.clone()),
        };
        std::fs::write(path, cp.to_json()?)?;
    }
    let channels = ChannelSet::random(net.tasks(), 1.0, cfg.channel_seed(), MIN_GAIN)?;
    let rows = neural::feature_sweep(
        &net,
        &fs,
        &channels,
        &test,
        cfg.energy_grid(),
        n.trials,
        seed.wrapping_add(2),
    )?;
    write_csv(&rows, output(cfg)?)?;
    Ok(())
}

fn validate(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let scale = if cfg.quick { Scale::QUICK } else { Scale::FULL };
    let seed = cfg.seed();
    let mut checks = validation::run_suite(&scale, seed)?;
    for c in &checks {
        println!("{}", c.line());
    }
    let csv = validation::suite_csv(&checks)?;
    let repeat = validation::determinism(&csv, &scale, seed)?;
    println!("{}", repeat.line());
    checks.push(repeat);
    if let Some(path) = &cfg.out {
        std::fs::write(path, &csv)?;
    }
    let failed: Vec<u8> = checks
        .iter()
        .filter(|c| !c.passed())
        .map(|c| c.criterion)
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::ValidationFailed(failed))
    }
}

pub fn run(cfg: &ExperimentConfig) -> Result<(), CliError> {
    match cfg.kind {
        Kind::LinearSweep | Kind::BasisCompare => linear(cfg),
        Kind::NonlinearSweep => nonlinear(cfg),
        Kind::Validate => validate(cfg),
    }
}

/// Parse, run and map the outcome to an exit code.
pub fn main_with(cli: Cli) -> ExitCode {
    let (kind, args) = cli.command.split();
    let env_seed = std::env::var(config::SEED_ENV).ok();
    let result = load_config(kind, args, env_seed.as_deref()).and_then(|cfg| run(&cfg));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("taskcomm: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
