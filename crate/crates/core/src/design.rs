//! Encoder design for the Gaussian linear case.
//!
//! Every designed encoder has the factored form `G = √W·Pᵀ`: an orthogonal
//! basis `P` whose columns are feature extractors, and per-feature energies
//! `w_d`. With `P` fixed the sum-MSE objective separates across features:
//!
//! ```text
//! Σ_d Σ_n c[d][n] · a_n / (w_d + a_n),   a_n = h_n^{-2},  c[d][n] = ‖Σ_{x_n y} p_d‖²
//! ```
//!
//! so the design reduces to choosing `P` ([`shared_basis`]) and solving a
//! separable convex allocation ([`allocate_energy`]). A single user admits
//! the closed-form water-filling optimum ([`single_user_encoder`]).

use serde::{Deserialize, Serialize};

use crate::linalg::{self, serde_matrix, Mat, Vect};
use crate::model::{ChannelSet, GaussianStats};
use crate::{Error, Result};

/// Features whose largest importance is below this fraction of the overall
/// largest importance are never funded.
pub const PRUNE_REL: f64 = 1e-12;
const NEGATIVE_TOL: f64 = 1e-12;
const MAX_BISECTIONS: usize = 400;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Encoder {
    /// Orthogonal `D × D` basis; column `d` is the feature extractor `p_d`.
    #[serde(with = "serde_matrix")]
    pub basis: Mat,
    /// Energy `w_d` spent on feature `d`.
    pub energies: Vec<f64>,
    /// Features with `w_d > 0`, ascending.
    pub active_dims: Vec<usize>,
    /// `D × N` table `c[d][n] = p_dᵀ M_n p_d`.
    #[serde(with = "serde_matrix")]
    pub importance: Mat,
    /// Lagrange multiplier of the energy constraint for the sum objective
    /// `Σ_n Tr(h_n^{-2} M_n (GᵀG + h_n^{-2} I)^{-1})`.
    pub beta: f64,
}

impl Encoder {
    pub(crate) fn assemble(basis: Mat, energies: Vec<f64>, importance: Mat, beta: f64) -> Self {
        let active_dims = energies
            .iter()
            .enumerate()
            .filter(|(_, &w)| w > 0.0)
            .map(|(d, _)| d)
            .collect();
        Self {
            basis,
            energies,
            active_dims,
            importance,
            beta,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.active_dims.len()
    }

    pub fn total_energy(&self) -> f64 {
        self.energies.iter().sum()
    }

    /// `√W·Pᵀ` restricted to the funded rows, `|active| × D`.
    pub fn matrix(&self) -> Mat {
        let d = self.input_dim();
        let mut g = Mat::zeros(self.active_dims.len(), d);
        for (row, &k) in self.active_dims.iter().enumerate() {
            let scale = self.energies[k].sqrt();
            g.row_mut(row)
                .copy_from(&(self.basis.column(k).transpose() * scale));
        }
        g
    }

    /// `√W·Pᵀ` including unfunded (zero) rows, `D × D`.
    pub fn full_matrix(&self) -> Mat {
        let mut g = self.basis.transpose();
        for (mut row, w) in g.row_iter_mut().zip(&self.energies) {
            row *= w.sqrt();
        }
        g
    }

    /// Sum objective evaluated through the importance table.
    pub fn objective(&self, channels: &ChannelSet) -> f64 {
        separable_objective(&self.importance, &self.energies, &channels.noise_levels())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

fn separable_objective(importance: &Mat, energies: &[f64], noise: &[f64]) -> f64 {
    let mut total = 0.0;
    for (d, &w) in energies.iter().enumerate() {
        for (n, &a) in noise.iter().enumerate() {
            total += importance[(d, n)] * a / (w + a);
        }
    }
    total
}

fn check_energy(energy: f64) -> Result<()> {
    if !(energy >= 0.0) || !energy.is_finite() {
        return Err(Error::Argument(format!(
            "energy {energy} must be finite and nonnegative"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct WaterLevel {
    /// Multiplier of `Tr(M (GᵀG + h^{-2} I)^{-1})`; 0 when degenerate.
    pub beta: f64,
    pub energies: Vec<f64>,
    /// Every eigenvalue was zero: nothing is worth transmitting.
    pub degenerate: bool,
}

/// Single-channel water level: find `β` with
/// `Σ_d max(√(λ_d/β) - h^{-2}, 0) = E`.
///
/// The level is bracketed between `h⁴·max λ` (nothing funded) and a value
/// shrunk geometrically until the budget is exceeded, then bisected. Once
/// the bisection settles the active set, `β` is recomputed in closed form
/// on that set, which makes the budget hold to rounding.
pub fn water_fill_beta(lambdas: &[f64], gain: f64, energy: f64) -> Result<WaterLevel> {
    check_energy(energy)?;
    if !(gain.abs() > 0.0) {
        return Err(Error::Argument(format!(
            "channel gain {gain} must be nonzero"
        )));
    }
    if let Some(l) = lambdas
        .iter()
        .find(|&&l| l < -NEGATIVE_TOL || !l.is_finite())
    {
        return Err(Error::Argument(format!(
            "eigenvalue {l} must be nonnegative"
        )));
    }
    let max_l = lambdas.iter().fold(0.0f64, |m, &l| m.max(l));
    let lambdas: Vec<f64> = lambdas
        .iter()
        .map(|&l| if l < PRUNE_REL * max_l { 0.0 } else { l })
        .collect();
    let noise = 1.0 / (gain * gain);
    let zero = vec![0.0; lambdas.len()];
    if max_l <= 0.0 {
        return Ok(WaterLevel {
            beta: 0.0,
            energies: zero,
            degenerate: true,
        });
    }
    let beta_hi = max_l / (noise * noise);
    if energy == 0.0 {
        return Ok(WaterLevel {
            beta: beta_hi,
            energies: zero,
            degenerate: false,
        });
    }

    let fill = |beta: f64| -> Vec<f64> {
        lambdas
            .iter()
            .map(|&l| ((l / beta).sqrt() - noise).max(0.0))
            .collect()
    };
    let total = |beta: f64| -> f64 { fill(beta).iter().sum() };

    let tol = 1e-10 * energy.max(1.0);
    let mut hi = beta_hi;
    let mut lo = beta_hi;
    while total(lo) < energy {
        hi = lo;
        lo *= 0.25;
    }
    let mut beta = hi;
    for _ in 0..MAX_BISECTIONS {
        let mid = (lo * hi).sqrt();
        if mid <= lo || mid >= hi {
            break;
        }
        if total(mid) > energy {
            lo = mid;
        } else {
            hi = mid;
        }
        beta = hi;
        if (total(hi) - energy).abs() <= tol && (total(lo) - energy).abs() <= tol {
            break;
        }
    }

    // closed form on the active set found above
    let active: Vec<f64> = lambdas
        .iter()
        .copied()
        .filter(|&l| l > beta * noise * noise)
        .collect();
    if !active.is_empty() {
        let root_sum: f64 = active.iter().map(|l| l.sqrt()).sum();
        let exact = (root_sum / (energy + active.len() as f64 * noise)).powi(2);
        let consistent = lambdas
            .iter()
            .all(|&l| (l > beta * noise * noise) == (l > exact * noise * noise));
        if consistent {
            beta = exact;
        }
    }
    Ok(WaterLevel {
        beta,
        energies: fill(beta),
        degenerate: false,
    })
}

/// Closed-form single-user optimum: `P` = eigenvectors of `M` (eigenvalues
/// descending) and water-filling energies.
pub fn single_user_encoder(gram: &Mat, gain: f64, energy: f64) -> Result<Encoder> {
    check_energy(energy)?;
    if gram.nrows() != gram.ncols() {
        return Err(Error::Dimension(format!(
            "M must be square, got {:?}",
            gram.shape()
        )));
    }
    let scale = gram.amax().max(1.0);
    if linalg::asymmetry(gram) > 1e-8 * scale {
        return Err(Error::Argument("M must be symmetric".into()));
    }
    let (_, basis) = linalg::sym_eigen_desc(gram);
    let importance = importance_table(std::slice::from_ref(gram), &basis);
    let lambdas: Vec<f64> = importance.column(0).iter().map(|&l| l.max(0.0)).collect();
    let level = water_fill_beta(&lambdas, gain, energy)?;
    // convert the per-user multiplier to the h^{-2}-weighted sum objective
    let beta = level.beta / (gain * gain);
    Ok(Encoder::assemble(basis, level.energies, importance, beta))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightMode {
    /// `m_n = 1`.
    Unit,
    /// `m_n = |h_n|^{-1}`.
    HighSnr,
    /// `m_n = |h_n|`.
    LowSnr,
    /// `m_n = |h_n| / (h_n² + SNR_min^{-1})`, `SNR_min = E·h_min²`.
    Blended,
}

impl WeightMode {
    pub fn name(self) -> &'static str {
        match self {
            WeightMode::Unit => "unit",
            WeightMode::HighSnr => "high-snr",
            WeightMode::LowSnr => "low-snr",
            WeightMode::Blended => "blended",
        }
    }
}

impl std::str::FromStr for WeightMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unit" => Ok(WeightMode::Unit),
            "high-snr" => Ok(WeightMode::HighSnr),
            "low-snr" => Ok(WeightMode::LowSnr),
            "blended" => Ok(WeightMode::Blended),
            other => Err(Error::Argument(format!("unknown weight mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskWeights {
    pub m: Vec<f64>,
    pub mode: WeightMode,
    /// Blended weights were requested with `E = 0` and fell back to low-SNR.
    pub fallback: bool,
}

pub fn task_weights(channels: &ChannelSet, mode: WeightMode) -> TaskWeights {
    let abs: Vec<f64> = channels.gains.iter().map(|h| h.abs()).collect();
    let (m, fallback) = match mode {
        WeightMode::Unit => (vec![1.0; abs.len()], false),
        WeightMode::HighSnr => (abs.iter().map(|h| 1.0 / h).collect(), false),
        WeightMode::LowSnr => (abs, false),
        WeightMode::Blended => {
            let snr_min = channels.energy * channels.min_abs_gain().powi(2);
            if snr_min > 0.0 {
                (
                    abs.iter().map(|h| h / (h * h + 1.0 / snr_min)).collect(),
                    false,
                )
            } else {
                (abs, true)
            }
        }
    };
    TaskWeights { m, mode, fallback }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BasisMethod {
    Svd,
    GramSchmidt,
    Natural,
}

impl BasisMethod {
    pub const ALL: [BasisMethod; 3] = [
        BasisMethod::Svd,
        BasisMethod::GramSchmidt,
        BasisMethod::Natural,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BasisMethod::Svd => "svd",
            BasisMethod::GramSchmidt => "gram-schmidt",
            BasisMethod::Natural => "natural",
        }
    }
}

impl std::str::FromStr for BasisMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "svd" => Ok(BasisMethod::Svd),
            "gram-schmidt" => Ok(BasisMethod::GramSchmidt),
            "natural" => Ok(BasisMethod::Natural),
            other => Err(Error::Argument(format!("unknown basis method {other:?}"))),
        }
    }
}

/// Orthogonal basis shared by all users, from the cross matrices
/// `Σ_{x_n y}` (any row counts, common column count).
pub fn shared_basis_from_cross(cross: &[Mat], weights: &[f64], method: BasisMethod) -> Result<Mat> {
    let dim = cross.first().map_or(0, |c| c.ncols());
    if cross.len() != weights.len() || cross.iter().any(|c| c.ncols() != dim) {
        return Err(Error::Dimension(
            "cross matrices and weights disagree".into(),
        ));
    }
    let basis = match method {
        BasisMethod::Natural => Mat::identity(dim, dim),
        BasisMethod::Svd => {
            let weighted: Vec<Mat> = cross.iter().zip(weights).map(|(c, &m)| c * m).collect();
            linalg::right_singular_basis(&linalg::vstack(&weighted)).0
        }
        BasisMethod::GramSchmidt => {
            let rows = cross
                .iter()
                .flat_map(|c| c.row_iter().map(|r| r.transpose()).collect::<Vec<Vect>>());
            linalg::gram_schmidt_complete(rows, dim, 1e-8).0
        }
    };
    Ok(basis)
}

pub fn shared_basis(
    stats: &GaussianStats,
    weights: &TaskWeights,
    method: BasisMethod,
) -> Result<Mat> {
    shared_basis_from_cross(&stats.cross, &weights.m, method)
}

/// `c[d][n] = p_dᵀ M_n p_d` for each basis column `p_d`.
pub fn importance_table(grams: &[Mat], basis: &Mat) -> Mat {
    let mut c = Mat::zeros(basis.ncols(), grams.len());
    for (n, m) in grams.iter().enumerate() {
        let mp = m * basis;
        for d in 0..basis.ncols() {
            c[(d, n)] = basis.column(d).dot(&mp.column(d)).max(0.0);
        }
    }
    c
}

/// `c[d][n] = ‖Σ_{x_n y} p_d‖²`, the same table computed from cross matrices.
pub fn importance_from_cross(cross: &[Mat], basis: &Mat) -> Mat {
    let mut c = Mat::zeros(basis.ncols(), cross.len());
    for (n, x) in cross.iter().enumerate() {
        let xp = x * basis;
        for d in 0..basis.ncols() {
            c[(d, n)] = xp.column(d).norm_squared();
        }
    }
    c
}

#[derive(Debug, Clone, PartialEq)]
pub struct Allocation {
    pub energies: Vec<f64>,
    pub beta: f64,
    /// No feature carries any importance; nothing is transmitted.
    pub degenerate: bool,
}

/// Marginal value of energy on one feature at `w`:
/// `Σ_n c_n a_n / (w + a_n)²`, decreasing in `w`.
fn marginal(row: &[f64], noise: &[f64], w: f64) -> f64 {
    row.iter()
        .zip(noise)
        .map(|(c, a)| c * a / ((w + a) * (w + a)))
        .sum()
}

/// Solve `marginal(w) = beta` for one feature, or 0 when even `w = 0` is
/// not worth funding. Bisection bracket with Newton steps accepted when
/// they stay inside it; from the left, Newton on this convex decreasing
/// function never overshoots the root.
fn feature_energy(row: &[f64], noise: &[f64], beta: f64) -> f64 {
    if marginal(row, noise, 0.0) <= beta {
        return 0.0;
    }
    let mut lo = 0.0;
    let bound: f64 = row.iter().zip(noise).map(|(c, a)| c * a).sum();
    let mut hi = (bound / beta).sqrt();
    let mut w = 0.0;
    for _ in 0..200 {
        let f = marginal(row, noise, w) - beta;
        if f > 0.0 {
            lo = w;
        } else {
            hi = w;
        }
        if hi - lo <= 1e-13 * hi {
            break;
        }
        let slope: f64 = -2.0
            * row
                .iter()
                .zip(noise)
                .map(|(c, a)| c * a / ((w + a) * (w + a) * (w + a)))
                .sum::<f64>();
        let newton = w - f / slope;
        let next = if newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if next == w {
            break;
        }
        w = next;
    }
    w
}

/// Minimize `Σ_d Σ_n c[d][n]·a_n/(w_d + a_n)` subject to `Σ w_d ≤ E`,
/// `w ≥ 0`, with `a_n = h_n^{-2}` and `c` a `D × N` importance table.
///
/// The multiplier `β` is bisected (geometrically) until the funded total
/// is within `1e-13·max(E, 1)` of the budget or the bracket collapses; the
/// returned `β` is always the end of the bracket whose allocation does not
/// exceed `E`.
pub fn allocate_energy(importance: &Mat, channels: &ChannelSet) -> Result<Allocation> {
    check_energy(channels.energy)?;
    if importance.ncols() != channels.users() {
        return Err(Error::Dimension(format!(
            "importance table has {} users, channel set has {}",
            importance.ncols(),
            channels.users()
        )));
    }
    if let Some(v) = importance
        .iter()
        .find(|&&v| v < -NEGATIVE_TOL || !v.is_finite())
    {
        return Err(Error::Argument(format!(
            "importance entry {v} must be nonnegative"
        )));
    }
    let noise = channels.noise_levels();
    let dims = importance.nrows();
    let max_c = importance.iter().fold(0.0f64, |m, &v| m.max(v));
    let rows: Vec<Vec<f64>> = (0..dims)
        .map(|d| {
            let row: Vec<f64> = importance.row(d).iter().map(|&v| v.max(0.0)).collect();
            let row_max = row.iter().fold(0.0f64, |m, &v| m.max(v));
            if row_max < PRUNE_REL * max_c {
                vec![0.0; row.len()]
            } else {
                row
            }
        })
        .collect();
    let zero = vec![0.0; dims];
    if max_c <= 0.0 {
        return Ok(Allocation {
            energies: zero,
            beta: 0.0,
            degenerate: true,
        });
    }
    let beta_hi = rows
        .iter()
        .map(|r| marginal(r, &noise, 0.0))
        .fold(0.0f64, f64::max);
    let energy = channels.energy;
    if energy == 0.0 {
        return Ok(Allocation {
            energies: zero,
            beta: beta_hi,
            degenerate: false,
        });
    }

    let fund = |beta: f64| -> Vec<f64> {
        rows.iter()
            .map(|r| feature_energy(r, &noise, beta))
            .collect()
    };
    // fixed summation order keeps the total independent of scheduling
    let total = |w: &[f64]| -> f64 { w.iter().sum() };

    let tol = 1e-13 * energy.max(1.0);
    let mut hi = beta_hi;
    let mut hi_w = zero;
    let mut lo = beta_hi;
    loop {
        lo *= 0.25;
        let w = fund(lo);
        if total(&w) >= energy {
            break;
        }
        hi = lo;
        hi_w = w;
    }
    for _ in 0..MAX_BISECTIONS {
        if energy - total(&hi_w) <= tol {
            break;
        }
        let mid = (lo * hi).sqrt();
        if mid <= lo || mid >= hi {
            break;
        }
        let w = fund(mid);
        if total(&w) > energy {
            lo = mid;
        } else {
            hi = mid;
            hi_w = w;
        }
    }
    Ok(Allocation {
        energies: hi_w,
        beta: hi,
        degenerate: false,
    })
}

/// Complete encoder for a fixed basis: importance from the cross matrices,
/// then energy allocation.
pub fn encoder_for_basis(cross: &[Mat], basis: Mat, channels: &ChannelSet) -> Result<Encoder> {
    let importance = importance_from_cross(cross, &basis);
    let alloc = allocate_energy(&importance, channels)?;
    Ok(Encoder::assemble(
        basis,
        alloc.energies,
        importance,
        alloc.beta,
    ))
}

/// Weights, shared basis, importance table and energy allocation.
pub fn multiuser_encoder(
    stats: &GaussianStats,
    channels: &ChannelSet,
    weight_mode: WeightMode,
    basis_method: BasisMethod,
) -> Result<Encoder> {
    if stats.users() != channels.users() {
        return Err(Error::Dimension(format!(
            "stats describe {} users, channel set has {}",
            stats.users(),
            channels.users()
        )));
    }
    let weights = task_weights(channels, weight_mode);
    let basis = shared_basis(stats, &weights, basis_method)?;
    let importance = importance_table(&stats.gram, &basis);
    let alloc = allocate_energy(&importance, channels)?;
    Ok(Encoder::assemble(
        basis,
        alloc.energies,
        importance,
        alloc.beta,
    ))
}

/// `‖Σ_n G (GᵀG + a_n I)^{-1} a_n M_n (GᵀG + a_n I)^{-1} - β G‖_F / ‖G‖_F`
/// for `G = √W·Pᵀ` (unnormalized when `G = 0`).
pub fn stationarity_residual(encoder: &Encoder, grams: &[Mat], channels: &ChannelSet) -> f64 {
    let g = encoder.full_matrix();
    let dim = g.ncols();
    let gtg = g.transpose() * &g;
    let mut lhs = Mat::zeros(g.nrows(), dim);
    for (m, a) in grams.iter().zip(channels.noise_levels()) {
        let inv = linalg::spd_inverse(&(&gtg + Mat::identity(dim, dim) * a));
        lhs += &g * &inv * (m * a) * &inv;
    }
    let residual = (lhs - &g * encoder.beta).norm();
    let norm = g.norm();
    if norm > 0.0 {
        residual / norm
    } else {
        residual
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{stats_from_ground_truth, synth_linear_model, Dims};

    fn diag(v: &[f64]) -> Mat {
        Mat::from_diagonal(&Vect::from_column_slice(v))
    }

    fn single_objective(lambdas: &[f64], w: &[f64], noise: f64) -> f64 {
        lambdas
            .iter()
            .zip(w)
            .map(|(l, w)| l * noise / (w + noise))
            .sum()
    }

    #[test]
    fn symmetric_split() {
        let enc = single_user_encoder(&diag(&[1.0, 1.0]), 1.0, 2.0).unwrap();
        assert!((enc.energies[0] - 1.0).abs() < 1e-12);
        assert!((enc.energies[1] - 1.0).abs() < 1e-12);
        assert!((enc.beta - 0.25).abs() < 1e-12);
        assert!(((1.0 / enc.beta).sqrt() - 1.0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_energy_transmits_nothing() {
        let enc = single_user_encoder(&diag(&[3.0, 1.0]), 1.0, 0.0).unwrap();
        assert!(enc.energies.iter().all(|&w| w == 0.0));
        assert_eq!(enc.output_dim(), 0);
        assert_eq!(enc.matrix().nrows(), 0);
    }

    #[test]
    fn negative_energy_rejected() {
        assert!(matches!(
            single_user_encoder(&diag(&[1.0]), 1.0, -1.0),
            Err(Error::Argument(_))
        ));
        assert!(matches!(
            water_fill_beta(&[1.0], 1.0, -0.5),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn water_fill_matches_grid_search() {
        // M = diag(4, 1, 0), h = 1, E = 1: oracle scans the split w1 + w2 = 1
        let enc = single_user_encoder(&diag(&[4.0, 1.0, 0.0]), 1.0, 1.0).unwrap();
        let ours = enc.objective(&ChannelSet::new(vec![1.0], 1.0).unwrap());
        let mut best = f64::INFINITY;
        for i in 0..=10_000 {
            let w1 = i as f64 * 1e-4;
            best = best.min(single_objective(
                &[4.0, 1.0, 0.0],
                &[w1, 1.0 - w1, 0.0],
                1.0,
            ));
        }
        assert!(
            (ours - best).abs() < 1e-6,
            "closed form {ours} vs grid {best}"
        );
        assert_eq!(enc.energies[2], 0.0);
    }

    #[test]
    fn water_level_examples() {
        let wl = water_fill_beta(&[1.0], 1.0, 1.0).unwrap();
        assert!((wl.beta - 0.25).abs() < 1e-12);
        let wl = water_fill_beta(&[1.0, 0.0], 1.0, 1.0).unwrap();
        assert!((wl.energies[0] - 1.0).abs() < 1e-12);
        assert_eq!(wl.energies[1], 0.0);
        let wl = water_fill_beta(&[0.0, 0.0], 2.0, 1.0).unwrap();
        assert!(wl.degenerate);
        assert!(wl.energies.iter().all(|&w| w == 0.0));
    }

    #[test]
    fn water_level_kkt_on_random_instances() {
        let mut rng = crate::rng::stream(99, 0);
        for _ in 0..50 {
            let dims = 1 + (crate::rng::normal(&mut rng).abs() * 4.0) as usize;
            let lambdas: Vec<f64> = (0..dims)
                .map(|_| crate::rng::normal(&mut rng).powi(2))
                .collect();
            let h = crate::rng::normal(&mut rng);
            let e = crate::rng::normal(&mut rng).abs() * 5.0 + 1e-3;
            let wl = water_fill_beta(&lambdas, h, e).unwrap();
            let noise = 1.0 / (h * h);
            let total: f64 = wl.energies.iter().sum();
            assert!((total - e).abs() <= 1e-10 * e.max(1.0));
            for (l, w) in lambdas.iter().zip(&wl.energies) {
                // stationarity on funded features, no gain on the others
                let grad = l / ((w + noise) * (w + noise));
                if *w > 0.0 {
                    assert!((grad - wl.beta).abs() < 1e-8 * wl.beta.max(1.0));
                } else {
                    assert!(grad <= wl.beta * (1.0 + 1e-8));
                }
                // complementary slackness
                assert!((w * (grad - wl.beta)).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn blended_weights_by_hand() {
        let ch = ChannelSet::new(vec![1.0, 2.0], 10.0).unwrap();
        let w = task_weights(&ch, WeightMode::Blended);
        assert!((w.m[0] - 1.0 / 1.1).abs() < 1e-12);
        assert!((w.m[1] - 2.0 / 4.1).abs() < 1e-12);
        assert!(!w.fallback);
        assert_eq!(task_weights(&ch, WeightMode::Unit).m, vec![1.0, 1.0]);
    }

    #[test]
    fn blended_weights_limits() {
        let gains = vec![0.5, -2.0, 1.5];
        let high = task_weights(
            &ChannelSet::new(gains.clone(), 1e12).unwrap(),
            WeightMode::Blended,
        );
        for (m, h) in high.m.iter().zip(&gains) {
            assert!((m - 1.0 / h.abs()).abs() < 1e-9);
        }
        let low = task_weights(
            &ChannelSet::new(gains.clone(), 1e-12).unwrap(),
            WeightMode::Blended,
        );
        let ratio = low.m[0] / gains[0].abs();
        for (m, h) in low.m.iter().zip(&gains) {
            assert!((m / h.abs() - ratio).abs() < 1e-9 * ratio);
        }
        let zero = task_weights(
            &ChannelSet::new(gains.clone(), 0.0).unwrap(),
            WeightMode::Blended,
        );
        assert!(zero.fallback);
        assert_eq!(zero.m, vec![0.5, 2.0, 1.5]);
    }

    #[test]
    fn allocation_boundary_optimum() {
        let c = Mat::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 1.0]);
        let ch = ChannelSet::new(vec![1.0, 1.0], 1.0).unwrap();
        let alloc = allocate_energy(&c, &ch).unwrap();
        assert!((alloc.energies[0] - 1.0).abs() < 1e-9);
        assert!(alloc.energies[1].abs() < 1e-9);
        let objective = separable_objective(&c, &alloc.energies, &[1.0, 1.0]);
        assert!((objective - 3.0).abs() < 1e-8);
        // grid oracle over w1 in [0, 1]
        let mut best = f64::INFINITY;
        for i in 0..=10_000 {
            let w1 = i as f64 * 1e-4;
            best = best.min(separable_objective(&c, &[w1, 1.0 - w1], &[1.0, 1.0]));
        }
        assert!(objective <= best + 1e-9);
    }

    #[test]
    fn allocation_zero_energy_and_degenerate() {
        let c = Mat::from_row_slice(2, 2, &[4.0, 1.0, 2.0, 1.0]);
        let ch = ChannelSet::new(vec![1.0, 3.0], 0.0).unwrap();
        let alloc = allocate_energy(&c, &ch).unwrap();
        assert!(alloc.energies.iter().all(|&w| w == 0.0));
        let obj = separable_objective(&c, &alloc.energies, &ch.noise_levels());
        assert!((obj - c.sum()).abs() < 1e-12);
        let none = allocate_energy(&Mat::zeros(3, 2), &ch.with_energy(5.0).unwrap()).unwrap();
        assert!(none.degenerate);
    }

    #[test]
    fn allocation_rejects_negative_importance() {
        let c = Mat::from_row_slice(1, 1, &[-1e-6]);
        let ch = ChannelSet::new(vec![1.0], 1.0).unwrap();
        assert!(matches!(allocate_energy(&c, &ch), Err(Error::Argument(_))));
    }

    #[test]
    fn allocation_agrees_with_water_filling() {
        let lambdas = [5.0, 2.5, 0.7, 0.1, 0.0];
        for &(h, e) in &[(1.0, 1.0), (0.4, 3.0), (2.0, 0.05), (1.3, 40.0)] {
            let ch = ChannelSet::new(vec![h], e).unwrap();
            let c = Mat::from_column_slice(5, 1, &lambdas);
            let alloc = allocate_energy(&c, &ch).unwrap();
            let wl = water_fill_beta(&lambdas, h, e).unwrap();
            let noise = 1.0 / (h * h);
            let a = separable_objective(&c, &alloc.energies, &[noise]);
            let b = separable_objective(&c, &wl.energies, &[noise]);
            assert!((a - b).abs() < 1e-8, "h={h} E={e}: {a} vs {b}");
            assert!((alloc.beta - wl.beta * noise).abs() < 1e-6 * alloc.beta);
        }
    }

    #[test]
    fn allocation_kkt() {
        let mut rng = crate::rng::stream(5, 1);
        let c = Mat::from_fn(6, 3, |_, _| crate::rng::normal(&mut rng).powi(2));
        let ch = ChannelSet::new(vec![0.7, -1.4, 2.2], 4.0).unwrap();
        let alloc = allocate_energy(&c, &ch).unwrap();
        let noise = ch.noise_levels();
        let total: f64 = alloc.energies.iter().sum();
        assert!((4.0 - 1e-6 * 4.0..=4.0 + 1e-9).contains(&total));
        for d in 0..6 {
            let row: Vec<f64> = c.row(d).iter().copied().collect();
            let g = marginal(&row, &noise, alloc.energies[d]);
            if alloc.energies[d] > 0.0 {
                assert!((g - alloc.beta).abs() < 1e-8 * alloc.beta.max(1.0));
            } else {
                assert!(g <= alloc.beta);
            }
        }
    }

    #[test]
    fn single_user_basis_spans_row_space() {
        let model = synth_linear_model(
            Dims {
                users: 1,
                latent: 5,
                target: 2,
                observation: 7,
            },
            None,
            3,
        )
        .unwrap();
        let stats = stats_from_ground_truth(&model);
        let ch = ChannelSet::new(vec![0.8], 2.0).unwrap();
        let w = task_weights(&ch, WeightMode::Blended);
        let p = shared_basis(&stats, &w, BasisMethod::Svd).unwrap();
        let lead = p.columns(0, 2).into_owned();
        let row_space = linalg::right_singular_basis(&stats.cross[0])
            .0
            .columns(0, 2)
            .into_owned();
        let diff = linalg::projector(&lead) - linalg::projector(&row_space);
        assert!(diff.norm() < 1e-8);
    }

    #[test]
    fn diagonal_grams_give_signed_permutation() {
        let cross = vec![
            Mat::from_row_slice(1, 3, &[0.0, 2.0, 0.0]),
            Mat::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 0.0, 0.5]),
        ];
        let p = shared_basis_from_cross(&cross, &[1.0, 0.7], BasisMethod::Svd).unwrap();
        for col in p.column_iter() {
            let big = col.iter().filter(|v| (v.abs() - 1.0).abs() < 1e-12).count();
            let small = col.iter().filter(|v| v.abs() < 1e-12).count();
            assert_eq!((big, small), (1, 2));
        }
    }

    #[test]
    fn every_basis_is_orthonormal_and_covers_interest() {
        let model = synth_linear_model(
            Dims {
                users: 3,
                latent: 8,
                target: 2,
                observation: 10,
            },
            Some(4),
            8,
        )
        .unwrap();
        let stats = stats_from_ground_truth(&model);
        let ch = ChannelSet::random(3, 5.0, 8, 1e-3).unwrap();
        let w = task_weights(&ch, WeightMode::Blended);
        for method in BasisMethod::ALL {
            let p = shared_basis(&stats, &w, method).unwrap();
            assert!(linalg::orthonormality_error(&p) < 1e-10, "{method:?}");
            let enc = multiuser_encoder(&stats, &ch, WeightMode::Blended, method).unwrap();
            assert!(enc.total_energy() <= 5.0 + 1e-9);
            assert!((enc.total_energy() - 5.0).abs() <= 1e-6 * 5.0);
            let table = importance_from_cross(&stats.cross, &enc.basis);
            assert!((table - &enc.importance).amax() < 1e-8);
        }
        // SVD: funded features lie in the union of interested subspaces
        let enc = multiuser_encoder(&stats, &ch, WeightMode::Blended, BasisMethod::Svd).unwrap();
        let stacked = linalg::vstack(&stats.cross);
        assert!(enc.output_dim() <= linalg::rank(&stacked, 1e-8));
        let p_active = Mat::from_columns(
            &enc.active_dims
                .iter()
                .map(|&d| enc.basis.column(d))
                .collect::<Vec<_>>(),
        );
        let span = linalg::projector(
            &linalg::right_singular_basis(&stacked)
                .0
                .columns(0, 4)
                .into_owned(),
        );
        assert!((&span * &p_active - &p_active).amax() < 1e-8);
    }

    #[test]
    fn single_user_reduction() {
        let model = synth_linear_model(
            Dims {
                users: 1,
                latent: 6,
                target: 3,
                observation: 8,
            },
            None,
            4,
        )
        .unwrap();
        let stats = stats_from_ground_truth(&model);
        let ch = ChannelSet::new(vec![-1.7], 3.0).unwrap();
        let multi = multiuser_encoder(&stats, &ch, WeightMode::Blended, BasisMethod::Svd).unwrap();
        let single = single_user_encoder(&stats.gram[0], -1.7, 3.0).unwrap();
        assert!((multi.objective(&ch) - single.objective(&ch)).abs() < 1e-10);
        assert!(stationarity_residual(&single, &stats.gram, &ch) < 1e-8);
    }

    #[test]
    fn perturbed_energies_raise_residual() {
        let grams = vec![diag(&[3.0, 1.0, 0.5])];
        let ch = ChannelSet::new(vec![1.2], 4.0).unwrap();
        let enc = single_user_encoder(&grams[0], 1.2, 4.0).unwrap();
        let base = stationarity_residual(&enc, &grams, &ch);
        let mut bad = enc.clone();
        bad.energies[0] += 0.3;
        bad.energies[1] -= 0.3;
        assert!(stationarity_residual(&bad, &grams, &ch) > base + 1e-3);
    }

    #[test]
    fn encoder_json_round_trip() {
        let enc = single_user_encoder(&diag(&[2.0, 1.0]), 1.0, 1.0).unwrap();
        let back = Encoder::from_json(&enc.to_json().unwrap()).unwrap();
        assert_eq!(back, enc);
    }
}
