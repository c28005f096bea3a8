//! Jointly Gaussian task family `y = C·z + v`, `x_n = K_n·z`, and the
//! whitened second-order statistics every other module consumes.
//!
//! All downstream code works in whitened observation coordinates
//! (`Σ_y = I`); [`stats_from_ground_truth`] is the single place where raw
//! coordinates are converted.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::linalg::{self, serde_matrix, Mat, Vect};
use crate::rng::{self, streams};
use crate::{Error, Result};

/// Eigenvalue floor for the observation whitener.
pub const WHITENER_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dims {
    /// Number of users / tasks.
    pub users: usize,
    pub latent: usize,
    pub target: usize,
    pub observation: usize,
}

impl Dims {
    /// N = 4, D_z = 20, D_x = 4, D_y = 30.
    pub const STANDARD: Dims = Dims {
        users: 4,
        latent: 20,
        target: 4,
        observation: 30,
    };

    fn validate(&self) -> Result<()> {
        if self.users == 0 || self.latent == 0 || self.target == 0 || self.observation == 0 {
            return Err(Error::Dimension(format!(
                "all dimensions must be positive, got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearGroundTruth {
    /// Observation mixing, `D_y × D_z`.
    #[serde(with = "serde_matrix")]
    pub mixing: Mat,
    /// Per-user task maps, each `D_x × D_z`.
    #[serde(with = "serde_matrix::vec")]
    pub task_maps: Vec<Mat>,
    pub dims: Dims,
    /// Dimension of the subspace containing every task-map row, if constrained.
    pub subspace_dim: Option<usize>,
}

impl LinearGroundTruth {
    pub fn new(mixing: Mat, task_maps: Vec<Mat>, subspace_dim: Option<usize>) -> Result<Self> {
        let (observation, latent) = mixing.shape();
        let target = task_maps.first().map_or(0, |k| k.nrows());
        let dims = Dims {
            users: task_maps.len(),
            latent,
            target,
            observation,
        };
        dims.validate()?;
        for (n, k) in task_maps.iter().enumerate() {
            if k.shape() != (target, latent) {
                return Err(Error::Dimension(format!(
                    "task map {n} has shape {:?}, expected ({target}, {latent})",
                    k.shape()
                )));
            }
        }
        Ok(Self {
            mixing,
            task_maps,
            dims,
            subspace_dim,
        })
    }

    /// `[K_1; …; K_N]`.
    pub fn stacked_task_maps(&self) -> Mat {
        linalg::vstack(&self.task_maps)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let raw: Self = serde_json::from_str(s)?;
        Self::new(raw.mixing, raw.task_maps, raw.subspace_dim)
    }
}

fn normal_matrix(rows: usize, cols: usize, seed: u64, stream: u64) -> Mat {
    let mut rng = rng::stream(seed, stream);
    // row-major fill so the draw order matches the JSON layout
    let mut data = vec![0.0; rows * cols];
    rng::fill_normal(&mut rng, &mut data);
    Mat::from_row_slice(rows, cols, &data)
}

/// Draw a random instance: Gaussian `C` and `K_n`, with the rows of every
/// `K_n` optionally confined to one random `subspace_dim`-dimensional
/// subspace (standard-normal combinations of an orthonormal basis).
pub fn synth_linear_model(
    dims: Dims,
    subspace_dim: Option<usize>,
    seed: u64,
) -> Result<LinearGroundTruth> {
    dims.validate()?;
    if let Some(s) = subspace_dim {
        if s == 0 || s > dims.latent {
            return Err(Error::Dimension(format!(
                "subspace dimension {s} must be in 1..={}",
                dims.latent
            )));
        }
    }
    let mixing = normal_matrix(
        dims.observation,
        dims.latent,
        seed,
        streams::OBSERVATION_MIX,
    );
    let basis = subspace_dim.map(|s| {
        let raw = normal_matrix(dims.latent, s, seed, streams::SUBSPACE);
        raw.qr().q()
    });
    let task_maps = (0..dims.users)
        .map(|n| {
            let stream = streams::TASK_MAP_BASE + n as u64;
            match &basis {
                Some(b) => normal_matrix(dims.target, b.ncols(), seed, stream) * b.transpose(),
                None => normal_matrix(dims.target, dims.latent, seed, stream),
            }
        })
        .collect();
    LinearGroundTruth::new(mixing, task_maps, subspace_dim)
}

/// Whitened second-order statistics of one task family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianStats {
    /// `Σ_{x_n y}` in whitened observation coordinates, each `D_x × D_y`.
    #[serde(with = "serde_matrix::vec")]
    pub cross: Vec<Mat>,
    /// `Σ_{x_n}`, each `D_x × D_x`.
    #[serde(with = "serde_matrix::vec")]
    pub prior: Vec<Mat>,
    /// `M_n = Σ_{y x_n} Σ_{x_n y}`, each `D_y × D_y`.
    #[serde(with = "serde_matrix::vec")]
    pub gram: Vec<Mat>,
    /// `Σ_y^{-1/2}`.
    #[serde(with = "serde_matrix")]
    pub whitener: Mat,
    pub mean_y: Vec<f64>,
}

impl GaussianStats {
    /// Statistics given directly in whitened coordinates (`Σ_y = I`, zero mean).
    pub fn from_whitened(cross: Vec<Mat>, prior: Vec<Mat>) -> Result<Self> {
        let dy = cross.first().map_or(0, |c| c.ncols());
        if cross.is_empty() || dy == 0 || cross.len() != prior.len() {
            return Err(Error::Dimension(format!(
                "need matching nonempty cross ({}) and prior ({}) lists",
                cross.len(),
                prior.len()
            )));
        }
        for (n, (c, p)) in cross.iter().zip(&prior).enumerate() {
            if c.ncols() != dy || p.shape() != (c.nrows(), c.nrows()) {
                return Err(Error::Dimension(format!(
                    "user {n}: cross {:?} / prior {:?} inconsistent with D_y = {dy}",
                    c.shape(),
                    p.shape()
                )));
            }
        }
        let gram = cross.iter().map(|c| c.transpose() * c).collect();
        Ok(Self {
            cross,
            prior,
            gram,
            whitener: Mat::identity(dy, dy),
            mean_y: vec![0.0; dy],
        })
    }

    pub fn users(&self) -> usize {
        self.cross.len()
    }

    pub fn observation_dim(&self) -> usize {
        self.whitener.nrows()
    }

    /// `MSE_n* = Tr(Σ_{x_n}) - Tr(Σ_{x_n y} Σ_{y x_n})`, the error with a
    /// noiseless link.
    pub fn mse_floor(&self) -> Vec<f64> {
        self.cross
            .iter()
            .zip(&self.prior)
            .map(|(c, p)| p.trace() - c.norm_squared())
            .collect()
    }

    pub fn prior_traces(&self) -> Vec<f64> {
        self.prior.iter().map(|p| p.trace()).collect()
    }

    /// Whitened, centered observation `Σ_y^{-1/2}(y - μ_y)`.
    pub fn whiten(&self, y: &Vect) -> Vect {
        &self.whitener * (y - DVector::from_column_slice(&self.mean_y))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// `Σ_y = CCᵀ + I`, `Σ_{x_n y} = K_n Cᵀ Σ_y^{-1/2}`, `Σ_{x_n} = K_n K_nᵀ`.
pub fn stats_from_ground_truth(model: &LinearGroundTruth) -> GaussianStats {
    let dy = model.dims.observation;
    let c = &model.mixing;
    let sigma_y = c * c.transpose() + Mat::identity(dy, dy);
    let whitener = linalg::inv_sqrt_floored(&sigma_y, WHITENER_FLOOR);
    let cross: Vec<Mat> = model
        .task_maps
        .iter()
        .map(|k| k * c.transpose() * &whitener)
        .collect();
    let prior = model.task_maps.iter().map(|k| k * k.transpose()).collect();
    let gram = cross.iter().map(|x| x.transpose() * x).collect();
    GaussianStats {
        cross,
        prior,
        gram,
        whitener,
        mean_y: vec![0.0; dy],
    }
}

/// Real scalar gains `h_n` and the total transmit energy budget `E`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSet {
    pub gains: Vec<f64>,
    pub energy: f64,
}

impl ChannelSet {
    pub fn new(gains: Vec<f64>, energy: f64) -> Result<Self> {
        if gains.is_empty() {
            return Err(Error::Argument(
                "channel set needs at least one user".into(),
            ));
        }
        if let Some(h) = gains.iter().find(|h| !(h.abs() > 0.0) || !h.is_finite()) {
            return Err(Error::Argument(format!(
                "channel gain {h} must be finite and nonzero"
            )));
        }
        if !(energy >= 0.0) || !energy.is_finite() {
            return Err(Error::Argument(format!(
                "energy budget {energy} must be finite and >= 0"
            )));
        }
        Ok(Self { gains, energy })
    }

    /// i.i.d. standard-normal gains, redrawn while `|h| < min_abs`.
    pub fn random(users: usize, energy: f64, seed: u64, min_abs: f64) -> Result<Self> {
        let mut rng = rng::stream(seed, streams::CHANNEL);
        let gains = (0..users)
            .map(|_| loop {
                let h = rng::normal(&mut rng);
                if h.abs() >= min_abs {
                    break h;
                }
            })
            .collect();
        Self::new(gains, energy)
    }

    pub fn with_energy(&self, energy: f64) -> Result<Self> {
        Self::new(self.gains.clone(), energy)
    }

    pub fn users(&self) -> usize {
        self.gains.len()
    }

    /// `h_n^{-2}`, the effective noise level seen by user `n`.
    pub fn noise_levels(&self) -> Vec<f64> {
        self.gains.iter().map(|h| 1.0 / (h * h)).collect()
    }

    pub fn min_abs_gain(&self) -> f64 {
        self.gains.iter().fold(f64::INFINITY, |m, h| m.min(h.abs()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    /// `count × D_y`, raw coordinates.
    pub y: Mat,
    /// Per-user targets, each `count × D_x`.
    pub x: Vec<Mat>,
    pub seed: u64,
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.y.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.y.nrows() == 0
    }

    /// Rows mapped through the stats whitener, `count × D_y`.
    pub fn whitened_y(&self, stats: &GaussianStats) -> Mat {
        let mean = nalgebra::RowDVector::from_row_slice(&stats.mean_y);
        let mut centered = self.y.clone();
        for mut row in centered.row_iter_mut() {
            row -= &mean;
        }
        centered * stats.whitener.transpose()
    }
}

/// One draw `(z, v)` for sample index `index`; `z` first, then `v`.
pub(crate) fn draw_latent(model: &LinearGroundTruth, seed: u64, index: u64) -> (Vect, Vect) {
    let mut rng = rng::stream(seed, streams::SAMPLES_BASE + index);
    let mut z = Vect::zeros(model.dims.latent);
    let mut v = Vect::zeros(model.dims.observation);
    rng::fill_normal(&mut rng, z.as_mut_slice());
    rng::fill_normal(&mut rng, v.as_mut_slice());
    (z, v)
}

pub fn sample_batch(model: &LinearGroundTruth, count: usize, seed: u64) -> Result<SampleBatch> {
    if count == 0 {
        return Err(Error::Argument("sample count must be at least 1".into()));
    }
    let d = model.dims;
    let mut y = Mat::zeros(count, d.observation);
    let mut x: Vec<Mat> = (0..d.users).map(|_| Mat::zeros(count, d.target)).collect();
    for i in 0..count {
        let (z, v) = draw_latent(model, seed, i as u64);
        let yi = &model.mixing * &z + v;
        y.row_mut(i).copy_from(&yi.transpose());
        for (k, xn) in model.task_maps.iter().zip(x.iter_mut()) {
            xn.row_mut(i).copy_from(&(k * &z).transpose());
        }
    }
    Ok(SampleBatch { y, x, seed })
}
