//! Experiment configuration: a JSON file with every field optional except
//! `kind`, overridden by command-line flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use taskcomm::validation::{LINEAR_ENERGY_GRID, NEURAL_ENERGY_GRID, STANDARD_SUBSPACE};
use taskcomm::{Dims, SolverOptions, SweepMethod, WeightMode};

use crate::CliError;

pub const SEED_ENV: &str = "TASKCOMM_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kind {
    LinearSweep,
    BasisCompare,
    NonlinearSweep,
    Validate,
}

impl Kind {
    pub fn name(self) -> &'static str {
        match self {
            Kind::LinearSweep => "linear-sweep",
            Kind::BasisCompare => "basis-compare",
            Kind::NonlinearSweep => "nonlinear-sweep",
            Kind::Validate => "validate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NeuralConfig {
    pub train_samples: usize,
    pub test_samples: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Link-noise draws per test sample.
    pub trials: usize,
    /// Load the trained network from here instead of training.
    pub checkpoint: Option<PathBuf>,
    /// Write the trained network and its feature statistics here.
    pub save_checkpoint: Option<PathBuf>,
}

impl Default for NeuralConfig {
    fn default() -> Self {
        Self {
            train_samples: 10_000,
            test_samples: 1_000,
            epochs: 2000,
            batch: 128,
            lr: 1e-3,
            trials: 20,
            checkpoint: None,
            save_checkpoint: None,
        }
    }
}

fn standard_dims() -> Dims {
    Dims::STANDARD
}

fn standard_subspace() -> Option<usize> {
    Some(STANDARD_SUBSPACE)
}

fn one() -> usize {
    1
}

fn blended() -> WeightMode {
    WeightMode::Blended
}

/// Kind-dependent fields are optional in files and always filled after
/// [`resolve`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: Kind,
    #[serde(default = "standard_dims")]
    pub dims: Dims,
    #[serde(default = "standard_subspace")]
    pub subspace_dim: Option<usize>,
    /// Master seed; instance `i` of a linear sweep uses `seed + i`.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Seed of the channel gains; the master seed when absent.
    #[serde(default)]
    pub channel_seed: Option<u64>,
    #[serde(default = "one")]
    pub instances: usize,
    #[serde(default)]
    pub energy_grid: Option<Vec<f64>>,
    #[serde(default)]
    pub methods: Option<Vec<SweepMethod>>,
    #[serde(default = "blended")]
    pub weight_mode: WeightMode,
    /// Monte-Carlo trials per linear sweep cell; 0 for closed form only.
    #[serde(default)]
    pub mc_trials: usize,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub neural: NeuralConfig,
    #[serde(default)]
    pub solver: SolverOptions,
    /// Validation at smoke-test scale.
    #[serde(default)]
    pub quick: bool,
}

impl ExperimentConfig {
    pub fn new(kind: Kind) -> Self {
        serde_json::from_value(serde_json::json!({ "kind": kind })).expect("defaults deserialize")
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn channel_seed(&self) -> u64 {
        self.channel_seed.unwrap_or_else(|| self.seed())
    }

    pub fn energy_grid(&self) -> &[f64] {
        self.energy_grid.as_deref().unwrap_or(&[])
    }

    pub fn methods(&self) -> &[SweepMethod] {
        self.methods.as_deref().unwrap_or(&[])
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub energy_grid: Option<Vec<f64>>,
    pub seed: Option<u64>,
    pub trials: Option<usize>,
    pub out: Option<PathBuf>,
    pub quick: bool,
}

pub fn parse_str(text: &str) -> Result<ExperimentConfig, CliError> {
    serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
}

pub fn parse_file(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_str(&text).map_err(|e| match e {
        CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Apply overrides, the seed fallback chain (flag, file, `TASKCOMM_SEED`,
/// 0) and kind defaults, then check invariants.
pub fn resolve(
    mut cfg: ExperimentConfig,
    overrides: &Overrides,
    env_seed: Option<&str>,
) -> Result<ExperimentConfig, CliError> {
    if let Some(grid) = &overrides.energy_grid {
        cfg.energy_grid = Some(grid.clone());
    }
    if let Some(out) = &overrides.out {
        cfg.out = Some(out.clone());
    }
    if let Some(t) = overrides.trials {
        match cfg.kind {
            Kind::NonlinearSweep => cfg.neural.trials = t,
            _ => cfg.mc_trials = t,
        }
    }
    cfg.quick |= overrides.quick;
    cfg.seed = match (overrides.seed, cfg.seed, env_seed) {
        (Some(s), _, _) | (None, Some(s), _) => Some(s),
        (None, None, Some(text)) => Some(text.trim().parse().map_err(|_| {
            CliError::Config(format!("{SEED_ENV}={text:?} is not an unsigned integer"))
        })?),
        (None, None, None) => Some(0),
    };
    cfg.channel_seed = Some(cfg.channel_seed());
    if cfg.energy_grid.is_none() {
        cfg.energy_grid = Some(match cfg.kind {
            Kind::NonlinearSweep => NEURAL_ENERGY_GRID.to_vec(),
            _ => LINEAR_ENERGY_GRID.to_vec(),
        });
    }
    if cfg.methods.is_none() {
        cfg.methods = Some(match cfg.kind {
            Kind::BasisCompare => SweepMethod::BASES.to_vec(),
            _ => SweepMethod::LINEAR.to_vec(),
        });
    }
    validate(&cfg)?;
    Ok(cfg)
}

fn validate(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let bad = |msg: String| Err(CliError::Config(msg));
    let grid = cfg.energy_grid();
    if grid.is_empty() {
        return bad("energy_grid: must not be empty".into());
    }
    if grid.iter().any(|e| !e.is_finite() || *e < 0.0) {
        return bad(format!(
            "energy_grid: values must be finite and nonnegative, got {grid:?}"
        ));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return bad(format!(
            "energy_grid: must be strictly increasing, got {grid:?}"
        ));
    }
    if cfg.methods().is_empty() {
        return bad("methods: must not be empty".into());
    }
    if cfg.kind == Kind::BasisCompare {
        if let Some(m) = cfg
            .methods()
            .iter()
            .find(|m| !SweepMethod::BASES.contains(m))
        {
            return bad(format!(
                "methods: {:?} is not a basis method (svd, gram-schmidt, natural)",
                m.tag()
            ));
        }
    }
    let d = cfg.dims;
    if d.users == 0 || d.latent == 0 || d.target == 0 || d.observation == 0 {
        return bad(format!("dims: all dimensions must be positive, got {d:?}"));
    }
    if cfg.subspace_dim.is_some_and(|s| s == 0 || s > d.latent) {
        return bad(format!("subspace_dim: must lie in 1..={}", d.latent));
    }
    if cfg.instances == 0 {
        return bad("instances: must be at least 1".into());
    }
    let n = &cfg.neural;
    if n.train_samples == 0 || n.test_samples == 0 || n.batch == 0 || n.trials == 0 {
        return bad("neural: sample counts, batch and trials must be positive".into());
    }
    if !(n.lr > 0.0 && n.lr.is_finite()) {
        return bad(format!("neural.lr: must be positive, got {}", n.lr));
    }
    Ok(())
}
