//! Decoding and evaluation over the broadcast channel.
//!
//! User `n` receives `r_n = h_n·G·ỹ + u_n`, `u_n ~ N(0, I)`, and applies the
//! linear MMSE decoder. MSE is available in closed form and by Monte-Carlo
//! simulation of the full sample → encode → channel → decode chain. The TDM
//! and direct-broadcast baselines and energy sweeps live here too.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::{
    allocate_energy, multiuser_encoder, single_user_encoder, BasisMethod, Encoder, WeightMode,
};
use crate::linalg::{self, Mat, Vect};
use crate::model::{
    draw_latent, stats_from_ground_truth, synth_linear_model, ChannelSet, Dims, GaussianStats,
    LinearGroundTruth,
};
use crate::refopt::{solve_reference, SolverOptions};
use crate::rng;
use crate::{Error, Result};

const SIM_STREAM_BASE: u64 = 1 << 40;

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    /// `D_x × r`, with `r` the encoder output dimension.
    pub f: Mat,
    pub user: usize,
}

impl Decoder {
    pub fn estimate(&self, received: &Vect) -> Vect {
        &self.f * received
    }
}

/// `F = h·Σ_{x_n y}·Gᵀ·(h²GGᵀ + I)^{-1}`.
pub fn mmse_decoder(stats: &GaussianStats, g: &Mat, gain: f64, user: usize) -> Decoder {
    let rows = g.nrows();
    let cross = &stats.cross[user];
    if rows == 0 {
        return Decoder {
            f: Mat::zeros(cross.nrows(), 0),
            user,
        };
    }
    let inner = g * g.transpose() * (gain * gain) + Mat::identity(rows, rows);
    let f = cross * g.transpose() * linalg::spd_inverse(&inner) * gain;
    Decoder { f, user }
}

/// Factored decoder `Σ_{x_n y}·P·h√W(h²W + I)^{-1}` on the funded features,
/// matching the rows of [`Encoder::matrix`].
pub fn mmse_decoder_factored(
    stats: &GaussianStats,
    encoder: &Encoder,
    gain: f64,
    user: usize,
) -> Decoder {
    let cross = &stats.cross[user];
    let mut f = Mat::zeros(cross.nrows(), encoder.active_dims.len());
    for (col, &d) in encoder.active_dims.iter().enumerate() {
        let w = encoder.energies[d];
        let scale = gain * w.sqrt() / (gain * gain * w + 1.0);
        f.column_mut(col)
            .copy_from(&(cross * encoder.basis.column(d) * scale));
    }
    Decoder { f, user }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    Analytic,
    MonteCarlo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloStats {
    pub trials: usize,
    /// Standard error of each per-user mean.
    pub per_user_se: Vec<f64>,
    pub sum_se: f64,
    /// Empirical `E[‖s‖²]` and its standard error.
    pub mean_energy: f64,
    pub energy_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_user_mse: Vec<f64>,
    pub sum_mse: f64,
    /// Noiseless-link error `MSE_n*` of each user.
    pub mse_floor: Vec<f64>,
    pub method_tag: String,
    pub energy: f64,
    pub mode: EvalMode,
    pub monte_carlo: Option<MonteCarloStats>,
}

impl EvalReport {
    /// Per-user error above the noiseless floor.
    pub fn excess(&self) -> Vec<f64> {
        self.per_user_mse
            .iter()
            .zip(&self.mse_floor)
            .map(|(m, f)| m - f)
            .collect()
    }
}

fn check_users(stats: &GaussianStats, channels: &ChannelSet) -> Result<()> {
    if stats.users() != channels.users() {
        return Err(Error::Dimension(format!(
            "stats describe {} users, channel set has {}",
            stats.users(),
            channels.users()
        )));
    }
    Ok(())
}

fn user_mse(stats: &GaussianStats, g: &Mat, gain: f64, user: usize) -> f64 {
    let cross = &stats.cross[user];
    let prior = stats.prior[user].trace();
    let rows = g.nrows();
    if rows == 0 {
        return prior;
    }
    let inner = g * g.transpose() + Mat::identity(rows, rows) / (gain * gain);
    let cg = cross * g.transpose();
    let explained = (&cg * linalg::spd_inverse(&inner) * cg.transpose()).trace();
    prior - explained
}

/// Closed form `Tr(Σ_{x_n}) - Tr(Σ_{x_n y}Gᵀ(GGᵀ + h_n^{-2}I)^{-1}GΣ_{y x_n})`
/// for every user.
pub fn analytic_mse(
    stats: &GaussianStats,
    g: &Mat,
    channels: &ChannelSet,
    tag: &str,
) -> Result<EvalReport> {
    check_users(stats, channels)?;
    if g.ncols() != stats.observation_dim() {
        return Err(Error::Dimension(format!(
            "encoder has {} inputs, observation has {}",
            g.ncols(),
            stats.observation_dim()
        )));
    }
    let per_user_mse: Vec<f64> = channels
        .gains
        .iter()
        .enumerate()
        .map(|(n, &h)| user_mse(stats, g, h, n))
        .collect();
    Ok(EvalReport {
        sum_mse: per_user_mse.iter().sum(),
        per_user_mse,
        mse_floor: stats.mse_floor(),
        method_tag: tag.to_string(),
        energy: channels.energy,
        mode: EvalMode::Analytic,
        monte_carlo: None,
    })
}

/// Pairwise summation in a fixed tree order.
pub(crate) fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= 8 {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

pub(crate) fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = pairwise_sum(values) / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let sq: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
    let var = pairwise_sum(&sq) / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Monte-Carlo estimate of every user's MSE for encoder `g` with MMSE
/// decoders. Trial `t` draws all of its randomness from stream
/// `(seed, t)`, so results do not depend on the thread count.
pub fn simulate(
    model: &LinearGroundTruth,
    stats: &GaussianStats,
    g: &Mat,
    channels: &ChannelSet,
    trials: usize,
    seed: u64,
) -> Result<EvalReport> {
    check_users(stats, channels)?;
    if trials == 0 {
        return Err(Error::Argument("need at least one trial".into()));
    }
    let users = channels.users();
    let rows = g.nrows();
    let decoders: Vec<Decoder> = channels
        .gains
        .iter()
        .enumerate()
        .map(|(n, &h)| mmse_decoder(stats, g, h, n))
        .collect();

    // per trial: users' squared errors, then transmitted energy
    let per_trial: Vec<Vec<f64>> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let (z, v) = draw_latent(model, seed, t as u64);
            let y = &model.mixing * &z + v;
            let s = g * stats.whiten(&y);
            let mut rng = rng::stream(seed, SIM_STREAM_BASE + t as u64);
            let mut out = Vec::with_capacity(users + 1);
            for (n, dec) in decoders.iter().enumerate() {
                let mut noise = Vect::zeros(rows);
                rng::fill_normal(&mut rng, noise.as_mut_slice());
                let received = &s * channels.gains[n] + noise;
                let x = &model.task_maps[n] * &z;
                out.push((x - dec.estimate(&received)).norm_squared());
            }
            out.push(s.norm_squared());
            out
        })
        .collect();

    let column = |k: usize| -> Vec<f64> { per_trial.iter().map(|row| row[k]).collect() };
    let mut per_user_mse = Vec::with_capacity(users);
    let mut per_user_se = Vec::with_capacity(users);
    for n in 0..users {
        let (m, se) = mean_and_se(&column(n));
        per_user_mse.push(m);
        per_user_se.push(se);
    }
    let sums: Vec<f64> = per_trial
        .iter()
        .map(|row| row[..users].iter().sum())
        .collect();
    let (sum_mse, sum_se) = mean_and_se(&sums);
    let (mean_energy, energy_se) = mean_and_se(&column(users));
    Ok(EvalReport {
        per_user_mse,
        sum_mse,
        mse_floor: stats.mse_floor(),
        method_tag: "simulation".into(),
        energy: channels.energy,
        mode: EvalMode::MonteCarlo,
        monte_carlo: Some(MonteCarloStats {
            trials,
            per_user_se,
            sum_se,
            mean_energy,
            energy_se,
        }),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TdmSplit {
    /// `E_n = E / N`.
    Equal,
    /// Energy split minimizing the summed MSE (common multiplier across
    /// the users' water-filling problems).
    Optimized,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TdmResult {
    pub report: EvalReport,
    pub encoders: Vec<Encoder>,
    pub user_energy: Vec<f64>,
}

/// Time-division baseline: each user gets a dedicated single-user optimal
/// encoder with its share of the energy; sum-MSE adds up the users' own
/// errors. The `N`-fold channel-use cost is not charged.
pub fn tdm_baseline(
    stats: &GaussianStats,
    channels: &ChannelSet,
    split: TdmSplit,
) -> Result<TdmResult> {
    check_users(stats, channels)?;
    let users = channels.users();
    let user_energy = match split {
        TdmSplit::Equal => vec![channels.energy / users as f64; users],
        TdmSplit::Optimized => {
            // one separable problem over (user, eigen-direction) pairs, each
            // pair reaching only its own user
            let dim = stats.observation_dim();
            let mut table = Mat::zeros(dim * users, users);
            for (n, m) in stats.gram.iter().enumerate() {
                let (values, _) = linalg::sym_eigen_desc(m);
                for d in 0..dim {
                    table[(n * dim + d, n)] = values[d].max(0.0);
                }
            }
            let alloc = allocate_energy(&table, channels)?;
            (0..users)
                .map(|n| alloc.energies[n * dim..(n + 1) * dim].iter().sum())
                .collect()
        }
    };
    let mut encoders = Vec::with_capacity(users);
    let mut per_user_mse = Vec::with_capacity(users);
    for n in 0..users {
        let enc = single_user_encoder(&stats.gram[n], channels.gains[n], user_energy[n])?;
        per_user_mse.push(user_mse(stats, &enc.matrix(), channels.gains[n], n));
        encoders.push(enc);
    }
    let tag = match split {
        TdmSplit::Equal => "tdm-equal",
        TdmSplit::Optimized => "tdm-opt",
    };
    let report = EvalReport {
        sum_mse: per_user_mse.iter().sum(),
        per_user_mse,
        mse_floor: stats.mse_floor(),
        method_tag: tag.into(),
        energy: channels.energy,
        mode: EvalMode::Analytic,
        monte_carlo: None,
    };
    Ok(TdmResult {
        report,
        encoders,
        user_energy,
    })
}

/// `G = ηI` with `η = √(E/D_y)`: every whitened dimension at equal power.
pub fn direct_broadcast(stats: &GaussianStats, channels: &ChannelSet) -> Result<EvalReport> {
    let dim = stats.observation_dim();
    let eta = (channels.energy / dim as f64).sqrt();
    let g = Mat::identity(dim, dim) * eta;
    analytic_mse(stats, &g, channels, "direct")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepMethod {
    /// Shared SVD basis with the configured task weights.
    Proposed,
    Reference,
    TdmEqual,
    TdmOpt,
    Direct,
    /// Basis comparison variants, all with the configured task weights.
    Svd,
    GramSchmidt,
    Natural,
}

impl SweepMethod {
    pub const LINEAR: [SweepMethod; 5] = [
        SweepMethod::Proposed,
        SweepMethod::Reference,
        SweepMethod::TdmEqual,
        SweepMethod::TdmOpt,
        SweepMethod::Direct,
    ];
    pub const BASES: [SweepMethod; 3] = [
        SweepMethod::Svd,
        SweepMethod::GramSchmidt,
        SweepMethod::Natural,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            SweepMethod::Proposed => "proposed",
            SweepMethod::Reference => "reference",
            SweepMethod::TdmEqual => "tdm-equal",
            SweepMethod::TdmOpt => "tdm-opt",
            SweepMethod::Direct => "direct",
            SweepMethod::Svd => "svd",
            SweepMethod::GramSchmidt => "gram-schmidt",
            SweepMethod::Natural => "natural",
        }
    }

    fn basis(self) -> Option<BasisMethod> {
        match self {
            SweepMethod::Proposed | SweepMethod::Svd => Some(BasisMethod::Svd),
            SweepMethod::GramSchmidt => Some(BasisMethod::GramSchmidt),
            SweepMethod::Natural => Some(BasisMethod::Natural),
            _ => None,
        }
    }
}

impl std::str::FromStr for SweepMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            SweepMethod::LINEAR.as_slice(),
            SweepMethod::BASES.as_slice(),
        ]
        .concat()
        .into_iter()
        .find(|m| m.tag() == s)
        .ok_or_else(|| Error::Argument(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McOptions {
    pub trials: usize,
    pub seed: u64,
}

/// One instance of a sweep: model, statistics, channel gains (energy is
/// overridden per row) and the seed that generated them.
#[derive(Debug, Clone)]
pub struct SweepInstance {
    pub model: LinearGroundTruth,
    pub stats: GaussianStats,
    pub channels: ChannelSet,
    pub seed: u64,
}

/// Gains below this magnitude are redrawn when instances are generated.
pub const MIN_GAIN: f64 = 1e-3;

impl SweepInstance {
    /// Model, statistics and i.i.d. standard normal gains, all from `seed`.
    pub fn generate(dims: Dims, subspace_dim: Option<usize>, seed: u64) -> Result<Self> {
        let model = synth_linear_model(dims, subspace_dim, seed)?;
        let stats = stats_from_ground_truth(&model);
        let channels = ChannelSet::random(dims.users, 1.0, seed, MIN_GAIN)?;
        Ok(Self {
            model,
            stats,
            channels,
            seed,
        })
    }
}

/// One line of the results CSV. `user` is the user index, or `None` for
/// the sum over users.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub method: String,
    pub energy: f64,
    pub user: Option<usize>,
    /// Closed-form value; absent where none exists (nonlinear tasks).
    pub mse_analytic: Option<f64>,
    pub mse_mc: Option<f64>,
    pub mc_se: Option<f64>,
    pub seed: u64,
}

pub const CSV_HEADER: [&str; 7] = [
    "method",
    "E",
    "user",
    "mse_analytic",
    "mse_mc",
    "mc_se",
    "seed",
];

/// Encoder matrices (one per transmission) and analytic report of one
/// method at one energy.
fn evaluate_method(
    inst: &SweepInstance,
    channels: &ChannelSet,
    method: SweepMethod,
    weight_mode: WeightMode,
    solver: &SolverOptions,
) -> Result<(EvalReport, Vec<Mat>)> {
    let stats = &inst.stats;
    let tag = method.tag();
    match method {
        SweepMethod::TdmEqual | SweepMethod::TdmOpt => {
            let split = if method == SweepMethod::TdmEqual {
                TdmSplit::Equal
            } else {
                TdmSplit::Optimized
            };
            let res = tdm_baseline(stats, channels, split)?;
            Ok((
                res.report,
                res.encoders.iter().map(Encoder::matrix).collect(),
            ))
        }
        SweepMethod::Direct => {
            let dim = stats.observation_dim();
            let g = Mat::identity(dim, dim) * (channels.energy / dim as f64).sqrt();
            Ok((analytic_mse(stats, &g, channels, tag)?, vec![g]))
        }
        SweepMethod::Reference => {
            let sol = solve_reference(stats, channels, solver)?;
            Ok((analytic_mse(stats, &sol.g, channels, tag)?, vec![sol.g]))
        }
        _ => {
            let basis = method.basis().expect("basis method");
            let enc = multiuser_encoder(stats, channels, weight_mode, basis)?;
            let g = enc.matrix();
            Ok((analytic_mse(stats, &g, channels, tag)?, vec![g]))
        }
    }
}

/// Sum-MSE (and per-user MSE) of every method at every energy, analytic
/// and optionally Monte-Carlo. Rows are ordered by energy, then method,
/// then user, with the sum row last.
pub fn energy_sweep(
    inst: &SweepInstance,
    energies: &[f64],
    methods: &[SweepMethod],
    weight_mode: WeightMode,
    mc: Option<McOptions>,
    solver: &SolverOptions,
) -> Result<Vec<SweepRow>> {
    if energies.is_empty() {
        return Err(Error::Argument("energy grid is empty".into()));
    }
    let cells: Vec<(f64, SweepMethod)> = energies
        .iter()
        .flat_map(|&e| methods.iter().map(move |&m| (e, m)))
        .collect();
    let results: Vec<Result<Vec<SweepRow>>> = cells
        .par_iter()
        .map(|&(energy, method)| {
            let channels = inst.channels.with_energy(energy)?;
            let (report, encoders) = evaluate_method(inst, &channels, method, weight_mode, solver)?;
            let mc_report = match mc {
                Some(opts) => Some(simulate_transmissions(inst, &encoders, &channels, opts)?),
                None => None,
            };
            let users = report.per_user_mse.len();
            let mut rows = Vec::with_capacity(users + 1);
            for n in 0..=users {
                let (analytic, mc_val, mc_se) = if n < users {
                    let mcv = mc_report.as_ref().map(|r| {
                        (
                            r.per_user_mse[n],
                            r.monte_carlo.as_ref().unwrap().per_user_se[n],
                        )
                    });
                    (report.per_user_mse[n], mcv.map(|v| v.0), mcv.map(|v| v.1))
                } else {
                    let mcv = mc_report
                        .as_ref()
                        .map(|r| (r.sum_mse, r.monte_carlo.as_ref().unwrap().sum_se));
                    (report.sum_mse, mcv.map(|v| v.0), mcv.map(|v| v.1))
                };
                rows.push(SweepRow {
                    method: method.tag().to_string(),
                    energy,
                    user: (n < users).then_some(n),
                    mse_analytic: Some(analytic),
                    mse_mc: mc_val,
                    mc_se,
                    seed: inst.seed,
                });
            }
            Ok(rows)
        })
        .collect();
    let mut out = Vec::new();
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

/// Monte-Carlo for a method given its transmissions. A single encoder is a
/// broadcast; several encoders are TDM slots where user `n` decodes only
/// slot `n`.
fn simulate_transmissions(
    inst: &SweepInstance,
    encoders: &[Mat],
    channels: &ChannelSet,
    opts: McOptions,
) -> Result<EvalReport> {
    if encoders.len() == 1 {
        return simulate(
            &inst.model,
            &inst.stats,
            &encoders[0],
            channels,
            opts.trials,
            opts.seed,
        );
    }
    let mut per_user = Vec::new();
    let mut per_user_se = Vec::new();
    let mut mean_energy = 0.0;
    for (n, g) in encoders.iter().enumerate() {
        let r = simulate(
            &inst.model,
            &inst.stats,
            g,
            channels,
            opts.trials,
            opts.seed,
        )?;
        let mcs = r.monte_carlo.unwrap();
        per_user.push(r.per_user_mse[n]);
        per_user_se.push(mcs.per_user_se[n]);
        mean_energy += mcs.mean_energy;
    }
    // slots use the same trial streams; the sum's error is bounded by the
    // sum of per-slot errors
    let sum_se = per_user_se.iter().sum();
    Ok(EvalReport {
        sum_mse: per_user.iter().sum(),
        per_user_mse: per_user,
        mse_floor: inst.stats.mse_floor(),
        method_tag: "simulation".into(),
        energy: channels.energy,
        mode: EvalMode::MonteCarlo,
        monte_carlo: Some(MonteCarloStats {
            trials: opts.trials,
            per_user_se,
            sum_se,
            mean_energy,
            energy_se: f64::NAN,
        }),
    })
}

fn opt_field(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Write rows with the fixed header `method,E,user,mse_analytic,mse_mc,mc_se,seed`.
/// Sum rows carry `user = all`; missing values are empty.
pub fn write_csv<W: std::io::Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.write_record([
            r.method.clone(),
            r.energy.to_string(),
            r.user.map_or_else(|| "all".to_string(), |u| u.to_string()),
            opt_field(r.mse_analytic),
            opt_field(r.mse_mc),
            opt_field(r.mc_se),
            r.seed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{stats_from_ground_truth, synth_linear_model, Dims};

    fn instance(seed: u64, dims: Dims, subspace: Option<usize>, energy: f64) -> SweepInstance {
        let model = synth_linear_model(dims, subspace, seed).unwrap();
        let stats = stats_from_ground_truth(&model);
        let channels = ChannelSet::random(dims.users, energy, seed, 1e-3).unwrap();
        SweepInstance {
            model,
            stats,
            channels,
            seed,
        }
    }

    fn scalar_stats() -> GaussianStats {
        GaussianStats::from_whitened(
            vec![Mat::from_element(1, 1, 1.0)],
            vec![Mat::from_element(1, 1, 1.0)],
        )
        .unwrap()
    }

    #[test]
    fn scalar_decoder_and_mse() {
        let stats = scalar_stats();
        let g = Mat::from_element(1, 1, 1.0);
        assert!((mmse_decoder(&stats, &g, 1.0, 0).f[(0, 0)] - 0.5).abs() < 1e-15);
        let ch = ChannelSet::new(vec![1.0], 1.0).unwrap();
        let rep = analytic_mse(&stats, &g, &ch, "x").unwrap();
        assert!((rep.per_user_mse[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn empty_encoder_estimates_prior_mean() {
        let inst = instance(
            1,
            Dims {
                users: 2,
                latent: 3,
                target: 2,
                observation: 4,
            },
            None,
            1.0,
        );
        let g = Mat::zeros(0, 4);
        let dec = mmse_decoder(&inst.stats, &g, 1.0, 0);
        assert_eq!(dec.f.shape(), (2, 0));
        let rep = analytic_mse(&inst.stats, &g, &inst.channels, "none").unwrap();
        for (m, p) in rep.per_user_mse.iter().zip(inst.stats.prior_traces()) {
            assert!((m - p).abs() < 1e-12);
        }
    }

    #[test]
    fn factored_decoder_matches_general_formula() {
        let inst = instance(
            2,
            Dims {
                users: 3,
                latent: 5,
                target: 2,
                observation: 6,
            },
            None,
            4.0,
        );
        let enc = multiuser_encoder(
            &inst.stats,
            &inst.channels,
            WeightMode::Blended,
            BasisMethod::Svd,
        )
        .unwrap();
        let g = enc.matrix();
        for (n, &h) in inst.channels.gains.iter().enumerate() {
            let a = mmse_decoder(&inst.stats, &g, h, n);
            let b = mmse_decoder_factored(&inst.stats, &enc, h, n);
            assert!((a.f - b.f).amax() < 1e-10);
        }
    }

    #[test]
    fn large_energy_reaches_floor() {
        let mut inst = instance(
            3,
            Dims {
                users: 2,
                latent: 4,
                target: 2,
                observation: 5,
            },
            None,
            1e6,
        );
        inst.channels = ChannelSet::new(vec![1.0, -1.5], 1e6).unwrap();
        let dim = 5;
        let g = Mat::identity(dim, dim) * (1e6f64 / dim as f64).sqrt();
        let rep = analytic_mse(&inst.stats, &g, &inst.channels, "x").unwrap();
        for (m, f) in rep.per_user_mse.iter().zip(&rep.mse_floor) {
            assert!((m - f).abs() <= 1e-4 * f, "{m} vs {f}");
        }
    }

    #[test]
    fn mse_bounded_by_floor_and_prior() {
        for seed in 0..10 {
            let inst = instance(
                seed,
                Dims {
                    users: 3,
                    latent: 5,
                    target: 2,
                    observation: 7,
                },
                Some(3),
                2.0,
            );
            for method in BasisMethod::ALL {
                let enc = multiuser_encoder(&inst.stats, &inst.channels, WeightMode::Unit, method)
                    .unwrap();
                let rep = analytic_mse(&inst.stats, &enc.matrix(), &inst.channels, "x").unwrap();
                let prior = inst.stats.prior_traces();
                for n in 0..3 {
                    assert!(rep.per_user_mse[n] >= rep.mse_floor[n] - 1e-9);
                    assert!(rep.per_user_mse[n] <= prior[n] + 1e-9);
                }
                let parts: f64 = rep.per_user_mse.iter().sum();
                assert!((parts - rep.sum_mse).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn decoder_perturbation_never_helps() {
        // closed-form MSE of an arbitrary linear decoder F for user n:
        // E‖x - F r‖² = Tr Σx - 2h Tr(F G Σyx) + Tr(F (h² G Gᵀ + I) Fᵀ)
        for seed in 0..20 {
            let inst = instance(
                seed,
                Dims {
                    users: 2,
                    latent: 4,
                    target: 2,
                    observation: 5,
                },
                None,
                3.0,
            );
            let enc = multiuser_encoder(
                &inst.stats,
                &inst.channels,
                WeightMode::Blended,
                BasisMethod::Svd,
            )
            .unwrap();
            let g = enc.matrix();
            let h = inst.channels.gains[0];
            let cost = |f: &Mat| -> f64 {
                let sxy = &inst.stats.cross[0];
                let cov_r = &g * g.transpose() * (h * h) + Mat::identity(g.nrows(), g.nrows());
                inst.stats.prior[0].trace() - 2.0 * h * (f * &g * sxy.transpose()).trace()
                    + (f * cov_r * f.transpose()).trace()
            };
            let dec = mmse_decoder(&inst.stats, &g, h, 0);
            let base = cost(&dec.f);
            let mut rng = rng::stream(seed, 77);
            let delta = Mat::from_fn(dec.f.nrows(), dec.f.ncols(), |_, _| rng::normal(&mut rng));
            let delta = &delta * (1e-3 / delta.norm());
            assert!(cost(&(&dec.f + &delta)) >= base - 1e-14);
            assert!(cost(&(&dec.f - &delta)) >= base - 1e-14);
        }
    }

    #[test]
    fn simulation_is_deterministic() {
        let inst = instance(
            4,
            Dims {
                users: 2,
                latent: 3,
                target: 2,
                observation: 4,
            },
            None,
            2.0,
        );
        let g = Mat::identity(4, 4);
        let a = simulate(&inst.model, &inst.stats, &g, &inst.channels, 1, 5).unwrap();
        let b = simulate(&inst.model, &inst.stats, &g, &inst.channels, 1, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn simulation_matches_closed_form() {
        let inst = instance(
            6,
            Dims {
                users: 3,
                latent: 4,
                target: 2,
                observation: 6,
            },
            None,
            3.0,
        );
        let enc = multiuser_encoder(
            &inst.stats,
            &inst.channels,
            WeightMode::Blended,
            BasisMethod::Svd,
        )
        .unwrap();
        let g = enc.matrix();
        let an = analytic_mse(&inst.stats, &g, &inst.channels, "x").unwrap();
        let mc = simulate(&inst.model, &inst.stats, &g, &inst.channels, 100_000, 1).unwrap();
        let stats = mc.monte_carlo.as_ref().unwrap();
        assert!((mc.sum_mse - an.sum_mse).abs() <= 3.0 * stats.sum_se);
        assert!((stats.mean_energy - enc.total_energy()).abs() <= 3.0 * stats.energy_se);
    }

    #[test]
    fn simulation_noiseless_limit() {
        let inst = instance(
            7,
            Dims {
                users: 2,
                latent: 3,
                target: 2,
                observation: 4,
            },
            None,
            2.0,
        );
        let enc = multiuser_encoder(
            &inst.stats,
            &inst.channels,
            WeightMode::Blended,
            BasisMethod::Svd,
        )
        .unwrap();
        let loud =
            ChannelSet::new(inst.channels.gains.iter().map(|h| h * 1e6).collect(), 2.0).unwrap();
        let g = enc.matrix();
        let mc = simulate(&inst.model, &inst.stats, &g, &loud, 20_000, 3).unwrap();
        // noiseless link: the residual is the projection error outside span(G)
        let an = analytic_mse(&inst.stats, &g, &loud, "x").unwrap();
        let se = mc.monte_carlo.unwrap().sum_se;
        assert!((mc.sum_mse - an.sum_mse).abs() <= 4.0 * se);
    }

    #[test]
    fn tdm_reductions() {
        let inst = instance(
            8,
            Dims {
                users: 1,
                latent: 4,
                target: 2,
                observation: 5,
            },
            None,
            2.5,
        );
        let tdm = tdm_baseline(&inst.stats, &inst.channels, TdmSplit::Equal).unwrap();
        let single = single_user_encoder(&inst.stats.gram[0], inst.channels.gains[0], 2.5).unwrap();
        let rep = analytic_mse(&inst.stats, &single.matrix(), &inst.channels, "x").unwrap();
        assert!((tdm.report.sum_mse - rep.sum_mse).abs() < 1e-12);

        let cross = vec![Mat::from_row_slice(1, 2, &[1.0, 0.5]); 3];
        let prior = vec![Mat::from_element(1, 1, 2.0); 3];
        let stats = GaussianStats::from_whitened(cross, prior).unwrap();
        let ch = ChannelSet::new(vec![0.8; 3], 3.0).unwrap();
        let eq = tdm_baseline(&stats, &ch, TdmSplit::Equal).unwrap();
        let opt = tdm_baseline(&stats, &ch, TdmSplit::Optimized).unwrap();
        assert!((eq.report.sum_mse - opt.report.sum_mse).abs() < 1e-8);
    }

    #[test]
    fn optimized_tdm_never_worse() {
        for seed in 0..10 {
            let inst = instance(
                seed,
                Dims {
                    users: 3,
                    latent: 5,
                    target: 2,
                    observation: 6,
                },
                None,
                2.0,
            );
            let eq = tdm_baseline(&inst.stats, &inst.channels, TdmSplit::Equal).unwrap();
            let opt = tdm_baseline(&inst.stats, &inst.channels, TdmSplit::Optimized).unwrap();
            assert!(opt.report.sum_mse <= eq.report.sum_mse + 1e-9);
            assert!(opt.user_energy.iter().sum::<f64>() <= 2.0 + 1e-9);
        }
    }

    #[test]
    fn direct_broadcast_cases() {
        let inst = instance(
            9,
            Dims {
                users: 2,
                latent: 10,
                target: 2,
                observation: 30,
            },
            None,
            30.0,
        );
        let rep = direct_broadcast(&inst.stats, &inst.channels).unwrap();
        let by_hand = analytic_mse(
            &inst.stats,
            &Mat::identity(30, 30),
            &inst.channels,
            "direct",
        )
        .unwrap();
        assert!((rep.sum_mse - by_hand.sum_mse).abs() < 1e-12);
        let zero = direct_broadcast(&inst.stats, &inst.channels.with_energy(0.0).unwrap()).unwrap();
        let none = analytic_mse(&inst.stats, &Mat::zeros(0, 30), &inst.channels, "x").unwrap();
        assert!((zero.sum_mse - none.sum_mse).abs() < 1e-12);
        for seed in 0..5 {
            let inst = instance(
                seed,
                Dims {
                    users: 3,
                    latent: 6,
                    target: 2,
                    observation: 8,
                },
                Some(3),
                4.0,
            );
            let d = direct_broadcast(&inst.stats, &inst.channels).unwrap();
            let enc = multiuser_encoder(
                &inst.stats,
                &inst.channels,
                WeightMode::Blended,
                BasisMethod::Svd,
            )
            .unwrap();
            let p = analytic_mse(&inst.stats, &enc.matrix(), &inst.channels, "p").unwrap();
            assert!(p.sum_mse <= d.sum_mse + 1e-9);
        }
    }

    #[test]
    fn sweep_is_monotone_and_bounded_by_reference() {
        let inst = instance(
            10,
            Dims {
                users: 3,
                latent: 6,
                target: 2,
                observation: 8,
            },
            Some(4),
            1.0,
        );
        let energies = [0.0, 0.5, 2.0, 8.0];
        let methods = SweepMethod::LINEAR;
        let rows = energy_sweep(
            &inst,
            &energies,
            &methods,
            WeightMode::Blended,
            None,
            &SolverOptions::default(),
        )
        .unwrap();
        assert_eq!(rows.len(), energies.len() * methods.len() * 4);
        for m in methods {
            let sums: Vec<f64> = rows
                .iter()
                .filter(|r| r.method == m.tag() && r.user.is_none())
                .map(|r| r.mse_analytic.unwrap())
                .collect();
            assert!(
                sums.windows(2).all(|w| w[1] <= w[0] + 1e-9),
                "{m:?} {sums:?}"
            );
        }
        let sum_of = |tag: &str, e: f64| {
            rows.iter()
                .find(|r| r.method == tag && r.energy == e && r.user.is_none())
                .unwrap()
                .mse_analytic
                .unwrap()
        };
        for &e in &energies {
            assert!(sum_of("reference", e) <= sum_of("proposed", e) + 1e-8);
        }
    }

    #[test]
    fn csv_header_and_layout() {
        let rows = vec![SweepRow {
            method: "proposed".into(),
            energy: 1.5,
            user: None,
            mse_analytic: Some(0.25),
            mse_mc: None,
            mc_se: None,
            seed: 3,
        }];
        let mut buf = Vec::new();
        write_csv(&rows, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "method,E,user,mse_analytic,mse_mc,mc_se,seed\nproposed,1.5,all,0.25,,,3\n"
        );
    }

    #[test]
    fn method_names_parse() {
        for m in SweepMethod::LINEAR.iter().chain(&SweepMethod::BASES) {
            assert_eq!(m.tag().parse::<SweepMethod>().unwrap(), *m);
        }
        assert!("bogus".parse::<SweepMethod>().is_err());
    }
}
