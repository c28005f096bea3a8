//! Globally optimal reference encoder.
//!
//! The sum objective depends on `G` only through `R = GᵀG`, and
//!
//! ```text
//! f(R) = Σ_n a_n · Tr(M_n (R + a_n I)^{-1}),   a_n = h_n^{-2}
//! ```
//!
//! is convex on the PSD cone. Minimizing it over `{R ⪰ 0, Tr R ≤ E}` by
//! projected gradient therefore certifies the optimum up to the stopping
//! tolerance; any factor `G` with `GᵀG = R` is an optimal encoder.

use serde::{Deserialize, Serialize};

use crate::linalg::{self, serde_matrix, Mat};
use crate::model::{ChannelSet, GaussianStats};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverOptions {
    pub max_iter: usize,
    /// Stop once the relative objective decrease stays below this for
    /// `patience` consecutive iterations.
    pub tol: f64,
    /// Trial step of the first iteration; later iterations start from the
    /// Barzilai-Borwein step.
    pub step: f64,
    pub armijo: f64,
    pub patience: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iter: 20_000,
            tol: 1e-10,
            step: 1.0,
            armijo: 1e-4,
            patience: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceSolution {
    #[serde(with = "serde_matrix")]
    pub r: Mat,
    /// `rank × D` factor with `GᵀG = R`.
    #[serde(with = "serde_matrix")]
    pub g: Mat,
    pub objective: f64,
    /// Objective at the start point, then after every accepted step.
    pub history: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

impl ReferenceSolution {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

fn check_inputs(r: &Mat, grams: &[Mat], channels: &ChannelSet) -> Result<()> {
    if grams.len() != channels.users() {
        return Err(Error::Dimension(format!(
            "{} gram matrices for {} users",
            grams.len(),
            channels.users()
        )));
    }
    if grams.iter().any(|m| m.shape() != r.shape()) || r.nrows() != r.ncols() {
        return Err(Error::Dimension(format!(
            "R {:?} does not match the gram matrices",
            r.shape()
        )));
    }
    Ok(())
}

fn value_only(r: &Mat, grams: &[Mat], noise: &[f64]) -> f64 {
    let dim = r.nrows();
    grams
        .iter()
        .zip(noise)
        .map(|(m, &a)| {
            let inv = linalg::spd_inverse(&(r + Mat::identity(dim, dim) * a));
            a * (m * inv).trace()
        })
        .sum()
}

/// Objective value and its gradient
/// `-Σ_n a_n (R + a_n I)^{-1} M_n (R + a_n I)^{-1}` (symmetrized).
pub fn objective_and_gradient(r: &Mat, grams: &[Mat], channels: &ChannelSet) -> Result<(f64, Mat)> {
    check_inputs(r, grams, channels)?;
    if linalg::asymmetry(r) > 1e-8 * r.amax().max(1.0) {
        return Err(Error::Argument("R must be symmetric".into()));
    }
    let dim = r.nrows();
    let mut value = 0.0;
    let mut grad = Mat::zeros(dim, dim);
    for (m, a) in grams.iter().zip(channels.noise_levels()) {
        let inv = linalg::spd_inverse(&(r + Mat::identity(dim, dim) * a));
        let inv_m = &inv * m;
        value += a * inv_m.trace();
        grad -= &inv_m * &inv * a;
    }
    Ok((value, linalg::symmetrize(&grad)))
}

/// Euclidean projection of the eigenvalues onto `{λ ≥ 0, Σλ ≤ E}`.
fn project_spectrum(values: &[f64], energy: f64) -> Vec<f64> {
    let clamped: Vec<f64> = values.iter().map(|v| v.max(0.0)).collect();
    if clamped.iter().sum::<f64>() <= energy {
        return clamped;
    }
    let mut sorted = clamped.clone();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut prefix = 0.0;
    let mut shift = 0.0;
    for (k, &v) in sorted.iter().enumerate() {
        prefix += v;
        let candidate = (prefix - energy) / (k + 1) as f64;
        if v - candidate > 0.0 {
            shift = candidate;
        } else {
            break;
        }
    }
    clamped.iter().map(|v| (v - shift).max(0.0)).collect()
}

/// Nearest point (Frobenius) of `{R ⪰ 0, Tr R ≤ E}` to the symmetric `s`.
pub fn project_psd_trace(s: &Mat, energy: f64) -> Mat {
    let (values, vectors) = linalg::sym_eigen_desc(s);
    let projected = project_spectrum(values.as_slice(), energy);
    let scaled = Mat::from_fn(vectors.nrows(), vectors.ncols(), |r, c| {
        vectors[(r, c)] * projected[c]
    });
    linalg::symmetrize(&(scaled * vectors.transpose()))
}

/// `G = Λ^{1/2} Uᵀ` over the eigenvalues of `R` above `1e-12`.
pub fn factor_encoder(r: &Mat) -> Mat {
    let (values, vectors) = linalg::sym_eigen_desc(r);
    let kept: Vec<usize> = (0..values.len()).filter(|&i| values[i] > 1e-12).collect();
    let mut g = Mat::zeros(kept.len(), r.ncols());
    for (row, &i) in kept.iter().enumerate() {
        g.row_mut(row)
            .copy_from(&(vectors.column(i).transpose() * values[i].sqrt()));
    }
    g
}

pub fn solve_reference(
    stats: &GaussianStats,
    channels: &ChannelSet,
    opts: &SolverOptions,
) -> Result<ReferenceSolution> {
    let dim = stats.observation_dim();
    let start = Mat::identity(dim, dim) * (channels.energy / dim as f64);
    solve_reference_from(&stats.gram, channels, opts, start)
}

/// Spectral projected gradient with monotone Armijo backtracking (halving)
/// from a feasible `start`.
pub fn solve_reference_from(
    grams: &[Mat],
    channels: &ChannelSet,
    opts: &SolverOptions,
    start: Mat,
) -> Result<ReferenceSolution> {
    check_inputs(&start, grams, channels)?;
    let energy = channels.energy;
    if !(energy >= 0.0) {
        return Err(Error::Argument(format!(
            "energy {energy} must be nonnegative"
        )));
    }
    let noise = channels.noise_levels();
    let mut r = project_psd_trace(&start, energy);
    let (mut value, mut grad) = objective_and_gradient(&r, grams, channels)?;
    let mut history = vec![value];
    let mut step = opts.step;
    let mut quiet = 0;
    let mut converged = energy == 0.0;
    let mut iterations = 0;

    while !converged && iterations < opts.max_iter {
        iterations += 1;
        let mut trial_step = step;
        let mut accepted = None;
        for _ in 0..80 {
            let candidate = project_psd_trace(&(&r - &grad * trial_step), energy);
            let direction = &candidate - &r;
            let slope = grad.dot(&direction);
            if slope >= 0.0 || direction.amax() == 0.0 {
                // projected gradient vanished to working precision
                break;
            }
            let cand_value = value_only(&candidate, grams, &noise);
            if cand_value <= value + opts.armijo * slope {
                accepted = Some((candidate, cand_value));
                break;
            }
            trial_step *= 0.5;
        }
        let Some((next, next_value)) = accepted else {
            converged = true;
            break;
        };
        let (_, next_grad) = objective_and_gradient(&next, grams, channels)?;
        let s = &next - &r;
        let y = &next_grad - &grad;
        let sy = s.dot(&y);
        step = if sy > 0.0 {
            (s.dot(&s) / sy).clamp(1e-12, 1e12)
        } else {
            trial_step * 2.0
        };

        let decrease = (value - next_value) / value.abs().max(f64::MIN_POSITIVE);
        r = next;
        value = next_value;
        grad = next_grad;
        history.push(value);
        if decrease < opts.tol {
            quiet += 1;
            if quiet >= opts.patience {
                converged = true;
            }
        } else {
            quiet = 0;
        }
    }

    let g = factor_encoder(&r);
    Ok(ReferenceSolution {
        r,
        g,
        objective: value,
        history,
        converged,
        iterations,
    })
}
