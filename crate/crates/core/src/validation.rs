//! Numerical check suite shared by the `validate` command and the
//! acceptance tests.
//!
//! Every check is a pure function of `(scale, seed)`. The numeric verdict
//! and metrics are deterministic; wall-clock time is reported separately
//! and never written to the CSV, so repeated runs produce identical bytes.

use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;

use crate::channel_eval::{
    analytic_mse, direct_broadcast, simulate, tdm_baseline, SweepInstance, TdmSplit,
};
use crate::design::{
    multiuser_encoder, single_user_encoder, stationarity_residual, BasisMethod, WeightMode,
};
use crate::linalg::{self, Mat};
use crate::model::{ChannelSet, Dims, GaussianStats};
use crate::neural::{self, Architecture, Layer, MultiTaskNet, NonlinearModel, TrainOptions};
use crate::refopt::{self, solve_reference, solve_reference_from, SolverOptions};
use crate::rng;
use crate::Result;

/// Default energies of the linear sweeps.
pub const LINEAR_ENERGY_GRID: [f64; 8] = [0.1, 0.3, 1.0, 3.0, 10.0, 30.0, 100.0, 300.0];
/// Default energies of the nonlinear sweep.
pub const NEURAL_ENERGY_GRID: [f64; 6] = [0.1, 1.0, 10.0, 100.0, 1e3, 1e4];
/// Energy at which the end-to-end error must approach the noiseless one.
pub const NEURAL_ASYMPTOTE_ENERGY: f64 = 1e6;
/// Subspace dimension of the full-size linear instances.
pub const STANDARD_SUBSPACE: usize = 8;

const STREAM_BASE: u64 = 1 << 48;
const CRITERION_STRIDE: u64 = 1 << 20;

fn instance_rng(seed: u64, criterion: u64, index: u64) -> rand_chacha::ChaCha8Rng {
    rng::stream(seed, STREAM_BASE + criterion * CRITERION_STRIDE + index)
}

/// Sizes of every check. [`Scale::FULL`] is the acceptance configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scale {
    pub single_user_instances: usize,
    pub random_encoders: usize,
    pub diagonal_instances: usize,
    pub sweep_instances: usize,
    pub mc_instances: usize,
    pub mc_trials: usize,
    pub refopt_instances: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub epochs: usize,
    pub e2e_trials: usize,
}

impl Scale {
    pub const FULL: Scale = Scale {
        single_user_instances: 30,
        random_encoders: 1000,
        diagonal_instances: 20,
        sweep_instances: 20,
        mc_instances: 20,
        mc_trials: 100_000,
        refopt_instances: 5,
        train_samples: 10_000,
        test_samples: 1_000,
        epochs: 2000,
        e2e_trials: 20,
    };

    /// Smoke-test sizes; verdicts at this scale are indicative only.
    pub const QUICK: Scale = Scale {
        single_user_instances: 6,
        random_encoders: 100,
        diagonal_instances: 4,
        sweep_instances: 3,
        mc_instances: 3,
        mc_trials: 5_000,
        refopt_instances: 1,
        train_samples: 1_000,
        test_samples: 200,
        epochs: 20,
        e2e_trials: 4,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metric {
    pub name: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub criterion: u8,
    pub name: &'static str,
    /// Verdict of the numerical conditions alone.
    pub numeric_pass: bool,
    /// Wall-clock budget, if the criterion has one.
    pub time_limit: Option<f64>,
    pub elapsed: f64,
    pub summary: String,
    pub metrics: Vec<Metric>,
}

impl Check {
    pub fn within_time(&self) -> bool {
        self.time_limit.is_none_or(|t| self.elapsed < t)
    }

    pub fn passed(&self) -> bool {
        self.numeric_pass && self.within_time()
    }

    /// One human-readable line.
    pub fn line(&self) -> String {
        let verdict = if self.passed() { "PASS" } else { "FAIL" };
        let budget = match self.time_limit {
            Some(t) => format!(" [{:.1}s / {t:.0}s]", self.elapsed),
            None => format!(" [{:.1}s]", self.elapsed),
        };
        format!(
            "{verdict} criterion {:>2} {}: {}{budget}",
            self.criterion, self.name, self.summary
        )
    }
}

struct Builder {
    criterion: u8,
    name: &'static str,
    time_limit: Option<f64>,
    start: Instant,
    metrics: Vec<Metric>,
}

impl Builder {
    fn new(criterion: u8, name: &'static str, time_limit: Option<f64>) -> Self {
        Self {
            criterion,
            name,
            time_limit,
            start: Instant::now(),
            metrics: Vec::new(),
        }
    }

    fn metric(&mut self, name: impl Into<String>, value: f64) {
        self.metrics.push(Metric {
            name: name.into(),
            value,
        });
    }

    fn finish(self, numeric_pass: bool, summary: String) -> Check {
        Check {
            criterion: self.criterion,
            name: self.name,
            numeric_pass,
            time_limit: self.time_limit,
            elapsed: self.start.elapsed().as_secs_f64(),
            summary,
            metrics: self.metrics,
        }
    }
}

fn nonzero_gain<R: Rng>(rng: &mut R, min_abs: f64) -> f64 {
    loop {
        let h = rng::normal(rng);
        if h.abs() >= min_abs {
            return h;
        }
    }
}

fn log_uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    (rng.random_range(lo.ln()..hi.ln())).exp()
}

fn gaussian<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Mat {
    let mut data = vec![0.0; rows * cols];
    rng::fill_normal(rng, &mut data);
    Mat::from_row_slice(rows, cols, &data)
}

fn objective_at(r: &Mat, grams: &[Mat], channels: &ChannelSet) -> Result<f64> {
    Ok(refopt::objective_and_gradient(r, grams, channels)?.0)
}

/// Criterion 1: the closed-form single-user encoder matches the reference
/// solver and is never beaten by random feasible encoders.
pub fn single_user_optimality(scale: &Scale, seed: u64) -> Result<Check> {
    let mut b = Builder::new(1, "single-user optimality", Some(30.0));
    let opts = SolverOptions::default();
    let results: Vec<Result<(f64, usize)>> = (0..scale.single_user_instances)
        .into_par_iter()
        .map(|i| {
            let mut rng = instance_rng(seed, 1, i as u64);
            let dim = rng.random_range(2..=10);
            let rows = rng.random_range(1..=dim);
            let cross = gaussian(&mut rng, rows, dim);
            let m = cross.transpose() * &cross;
            let h = nonzero_gain(&mut rng, 0.2);
            let energy = log_uniform(&mut rng, 0.1, 100.0);
            let ch = ChannelSet::new(vec![h], energy)?;
            let closed = single_user_encoder(&m, h, energy)?.objective(&ch);
            let grams = [m];
            let start = Mat::identity(dim, dim) * (energy / dim as f64);
            let reference = solve_reference_from(&grams, &ch, &opts, start)?.objective;
            let rel = (closed - reference).abs() / reference.abs();
            let mut beaten = 0;
            for _ in 0..scale.random_encoders {
                let r = rng.random_range(1..=dim);
                let g = gaussian(&mut rng, r, dim);
                let gram = g.transpose() * &g;
                let fill: f64 = rng.random_range(0.0..1.0);
                let scaled = &gram * (energy * (1.0 - fill) / gram.trace());
                if objective_at(&scaled, &grams, &ch)? < closed * (1.0 - 1e-12) {
                    beaten += 1;
                }
            }
            Ok((rel, beaten))
        })
        .collect();
    let mut max_rel: f64 = 0.0;
    let mut beaten_total = 0;
    for (i, r) in results.into_iter().enumerate() {
        let (rel, beaten) = r?;
        b.metric(format!("instance{i}_rel_gap"), rel);
        b.metric(format!("instance{i}_beaten"), beaten as f64);
        max_rel = max_rel.max(rel);
        beaten_total += beaten;
    }
    b.metric("max_rel_gap", max_rel);
    b.metric("random_encoders_better", beaten_total as f64);
    let pass = max_rel <= 1e-5 && beaten_total == 0;
    let summary = format!(
        "{} instances, max |closed-form - reference|/reference = {max_rel:.2e} (<= 1e-5), random encoders better: {beaten_total}",
        scale.single_user_instances
    );
    Ok(b.finish(pass, summary))
}

/// Simultaneously diagonalizable instance: `M_n = Q·diag(λ_n)·Qᵀ` with some
/// directions unused by every user.
fn diagonal_instance(seed: u64, index: u64) -> Result<(GaussianStats, ChannelSet)> {
    let mut rng = instance_rng(seed, 2, index);
    let dim = rng.random_range(6..=12);
    let users = rng.random_range(2..=4);
    let q = gaussian(&mut rng, dim, dim).qr().q();
    let unused = rng.random_range(1..=dim / 3);
    let mut cross = Vec::with_capacity(users);
    let mut prior = Vec::with_capacity(users);
    for _ in 0..users {
        let mut scale = vec![0.0; dim];
        for s in scale.iter_mut().take(dim - unused) {
            if rng.random_range(0.0..1.0) > 0.3 {
                *s = rng.random_range(0.1f64..5.0).sqrt();
            }
        }
        let c = Mat::from_diagonal(&nalgebra::DVector::from_vec(scale)) * q.transpose();
        prior.push(&c * c.transpose() + Mat::identity(dim, dim));
        cross.push(c);
    }
    let gains = (0..users).map(|_| nonzero_gain(&mut rng, 0.2)).collect();
    let energy = log_uniform(&mut rng, 0.1, 100.0);
    Ok((
        GaussianStats::from_whitened(cross, prior)?,
        ChannelSet::new(gains, energy)?,
    ))
}

/// Criterion 2: on simultaneously diagonalizable instances the shared-basis
/// design is optimal and stationary.
pub fn diagonal_exactness(scale: &Scale, seed: u64) -> Result<Check> {
    let mut b = Builder::new(2, "simultaneously diagonalizable exactness", Some(30.0));
    let opts = SolverOptions::default();
    let results: Vec<Result<(f64, f64)>> = (0..scale.diagonal_instances)
        .into_par_iter()
        .map(|i| {
            let (stats, ch) = diagonal_instance(seed, i as u64)?;
            let enc = multiuser_encoder(&stats, &ch, WeightMode::Blended, BasisMethod::Svd)?;
            let designed = enc.objective(&ch);
            let reference = solve_reference(&stats, &ch, &opts)?.objective;
            let residual = stationarity_residual(&enc, &stats.gram, &ch);
            Ok(((designed - reference).abs() / reference.abs(), residual))
        })
        .collect();
    let mut max_rel: f64 = 0.0;
    let mut max_res: f64 = 0.0;
    for (i, r) in results.into_iter().enumerate() {
        let (rel, res) = r?;
        b.metric(format!("instance{i}_rel_gap"), rel);
        b.metric(format!("instance{i}_residual"), res);
        max_rel = max_rel.max(rel);
        max_res = max_res.max(res);
    }
    b.metric("max_rel_gap", max_rel);
    b.metric("max_residual", max_res);
    let pass = max_rel <= 1e-6 && max_res < 1e-7;
    let summary = format!(
        "{} instances, max objective gap {max_rel:.2e} (<= 1e-6), max stationarity residual {max_res:.2e} (< 1e-7)",
        scale.diagonal_instances
    );
    Ok(b.finish(pass, summary))
}

/// Sum-MSE of every method at one sweep point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub instance: usize,
    pub energy: f64,
    pub reference: f64,
    pub proposed: f64,
    pub gram_schmidt: f64,
    pub natural: f64,
    pub tdm_equal: f64,
    pub direct: f64,
}

/// The full-size sweep shared by criteria 3 to 5.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSweep {
    pub points: Vec<SweepPoint>,
    pub elapsed: f64,
}

pub fn standard_instance(seed: u64) -> Result<SweepInstance> {
    SweepInstance::generate(Dims::STANDARD, Some(STANDARD_SUBSPACE), seed)
}

pub fn linear_sweep(scale: &Scale, seed: u64) -> Result<LinearSweep> {
    let start = Instant::now();
    let opts = SolverOptions::default();
    let cells: Vec<(usize, f64)> = (0..scale.sweep_instances)
        .flat_map(|i| LINEAR_ENERGY_GRID.iter().map(move |&e| (i, e)))
        .collect();
    let instances: Vec<SweepInstance> = (0..scale.sweep_instances)
        .map(|i| standard_instance(seed.wrapping_add(i as u64)))
        .collect::<Result<_>>()?;
    let points: Vec<Result<SweepPoint>> = cells
        .par_iter()
        .map(|&(i, energy)| {
            let inst = &instances[i];
            let stats = &inst.stats;
            let ch = inst.channels.with_energy(energy)?;
            let sum = |g: &Mat| -> Result<f64> { Ok(analytic_mse(stats, g, &ch, "")?.sum_mse) };
            let design = |basis| -> Result<f64> {
                sum(&multiuser_encoder(stats, &ch, WeightMode::Blended, basis)?.matrix())
            };
            Ok(SweepPoint {
                instance: i,
                energy,
                reference: sum(&solve_reference(stats, &ch, &opts)?.g)?,
                proposed: design(BasisMethod::Svd)?,
                gram_schmidt: design(BasisMethod::GramSchmidt)?,
                natural: design(BasisMethod::Natural)?,
                tdm_equal: tdm_baseline(stats, &ch, TdmSplit::Equal)?.report.sum_mse,
                direct: direct_broadcast(stats, &ch)?.sum_mse,
            })
        })
        .collect();
    Ok(LinearSweep {
        points: points.into_iter().collect::<Result<_>>()?,
        elapsed: start.elapsed().as_secs_f64(),
    })
}

fn point_key(p: &SweepPoint) -> String {
    format!("i{}_E{}", p.instance, p.energy)
}

/// Criterion 3: the proposed design stays within 5% of the reference.
pub fn near_optimality(sweep: &LinearSweep) -> Check {
    let mut b = Builder::new(3, "near-optimality vs reference", Some(300.0));
    let mut worst = (0.0f64, None);
    let mut over = 0;
    for p in &sweep.points {
        let ratio = p.proposed / p.reference;
        b.metric(format!("{}_ratio", point_key(p)), ratio);
        if ratio > 1.05 {
            over += 1;
        }
        if ratio > worst.0 {
            worst = (ratio, Some(*p));
        }
    }
    b.metric("max_ratio", worst.0);
    b.metric("points_over", over as f64);
    let at = worst.1.map_or(String::new(), |p| {
        format!(" at instance {} E={}", p.instance, p.energy)
    });
    let summary = format!(
        "max proposed/reference = {:.4}{at} (<= 1.05), {over} of {} points above",
        worst.0,
        sweep.points.len()
    );
    let mut check = b.finish(over == 0, summary);
    check.elapsed = sweep.elapsed;
    check
}

/// Criterion 4: the proposed design is no worse than TDM and direct
/// broadcast anywhere, and more than 1% better than both on at least half
/// of the points.
pub fn baseline_ordering(sweep: &LinearSweep) -> Check {
    let mut b = Builder::new(4, "ordering vs TDM and direct broadcast", None);
    let mut violations = 0;
    let mut strict = 0;
    for p in &sweep.points {
        b.metric(
            format!("{}_tdm_ratio", point_key(p)),
            p.proposed / p.tdm_equal,
        );
        b.metric(
            format!("{}_direct_ratio", point_key(p)),
            p.proposed / p.direct,
        );
        if p.proposed > p.tdm_equal || p.proposed > p.direct {
            violations += 1;
        }
        if p.proposed < 0.99 * p.tdm_equal && p.proposed < 0.99 * p.direct {
            strict += 1;
        }
    }
    let total = sweep.points.len();
    b.metric("violations", violations as f64);
    b.metric("strict_points", strict as f64);
    let pass = violations == 0 && 2 * strict >= total;
    let summary = format!(
        "{violations} points worse than a baseline, {strict}/{total} points >1% better than both (need >= half)"
    );
    b.finish(pass, summary)
}

/// Criterion 5: the SVD basis is never worse than the natural basis and at
/// most 1% worse than Gram-Schmidt.
pub fn basis_comparison(sweep: &LinearSweep) -> Check {
    let mut b = Builder::new(5, "basis comparison", None);
    let mut natural_bad = 0;
    let mut gs_bad = 0;
    let mut worst_gs: f64 = 0.0;
    for p in &sweep.points {
        let gs_ratio = p.proposed / p.gram_schmidt;
        b.metric(
            format!("{}_natural_ratio", point_key(p)),
            p.proposed / p.natural,
        );
        b.metric(format!("{}_gs_ratio", point_key(p)), gs_ratio);
        worst_gs = worst_gs.max(gs_ratio);
        if p.proposed > p.natural {
            natural_bad += 1;
        }
        if p.proposed > 1.01 * p.gram_schmidt {
            gs_bad += 1;
        }
    }
    b.metric("natural_violations", natural_bad as f64);
    b.metric("gs_violations", gs_bad as f64);
    b.metric("max_svd_over_gs", worst_gs);
    let summary = format!(
        "svd > natural at {natural_bad} points, svd > 1.01 x gram-schmidt at {gs_bad} points (max svd/gs {worst_gs:.4})"
    );
    b.finish(natural_bad == 0 && gs_bad == 0, summary)
}

/// Criterion 6: Monte-Carlo sum-MSE agrees with the closed form within
/// three standard errors.
pub fn monte_carlo_agreement(scale: &Scale, seed: u64) -> Result<Check> {
    let mut b = Builder::new(6, "analytic vs Monte-Carlo", None);
    let mut worst: f64 = 0.0;
    let mut worst_user: f64 = 0.0;
    let mut outside = 0;
    for i in 0..scale.mc_instances {
        let inst_seed = seed.wrapping_add(1000 + i as u64);
        let inst = standard_instance(inst_seed)?;
        let energy = LINEAR_ENERGY_GRID[i % LINEAR_ENERGY_GRID.len()];
        let ch = inst.channels.with_energy(energy)?;
        let g =
            multiuser_encoder(&inst.stats, &ch, WeightMode::Blended, BasisMethod::Svd)?.matrix();
        let exact = analytic_mse(&inst.stats, &g, &ch, "")?;
        let mc = simulate(
            &inst.model,
            &inst.stats,
            &g,
            &ch,
            scale.mc_trials,
            inst_seed,
        )?;
        let stats = mc
            .monte_carlo
            .as_ref()
            .expect("simulation reports statistics");
        let z = (mc.sum_mse - exact.sum_mse).abs() / stats.sum_se;
        for n in 0..exact.per_user_mse.len() {
            let zu = (mc.per_user_mse[n] - exact.per_user_mse[n]).abs() / stats.per_user_se[n];
            worst_user = worst_user.max(zu);
        }
        b.metric(format!("instance{i}_z"), z);
        worst = worst.max(z);
        if z > 3.0 {
            outside += 1;
        }
    }
    b.metric("max_z", worst);
    b.metric("max_user_z", worst_user);
    let summary = format!(
        "{} instances x {} trials, max |mc - analytic|/se of sum-MSE = {worst:.2} (<= 3), {outside} outside (per-user max {worst_user:.2})",
        scale.mc_instances, scale.mc_trials
    );
    Ok(b.finish(outside == 0, summary))
}

fn random_symmetric<R: Rng>(rng: &mut R, dim: usize) -> Mat {
    let a = gaussian(rng, dim, dim);
    linalg::symmetrize(&a)
}

/// Criterion 7: the reference solver descends monotonically, is independent
/// of its start point, and its gradient matches finite differences.
pub fn reference_consistency(scale: &Scale, seed: u64) -> Result<Check> {
    let mut b = Builder::new(7, "reference solver self-consistency", None);
    let opts = SolverOptions::default();
    let cases: Vec<(usize, f64)> = (0..scale.refopt_instances)
        .flat_map(|i| [1.0, 30.0].map(move |e| (i, e)))
        .collect();
    let results: Vec<Result<(bool, f64, f64)>> = cases
        .par_iter()
        .map(|&(i, energy)| {
            let inst = standard_instance(seed.wrapping_add(2000 + i as u64))?;
            let ch = inst.channels.with_energy(energy)?;
            let grams = &inst.stats.gram;
            let dim = inst.stats.observation_dim();
            let mut rng = instance_rng(seed, 7, (i * 2 + (energy > 1.0) as usize) as u64);
            let first = solve_reference(&inst.stats, &ch, &opts)?;
            let monotone = first.history.windows(2).all(|w| w[1] <= w[0]);
            let v = gaussian(&mut rng, dim, dim);
            let mut alt_start = &v * v.transpose();
            alt_start *= energy / alt_start.trace();
            let second = solve_reference_from(grams, &ch, &opts, alt_start.clone())?;
            let monotone = monotone && second.history.windows(2).all(|w| w[1] <= w[0]);
            let agree = (first.objective - second.objective).abs() / first.objective;
            let (_, grad) = refopt::objective_and_gradient(&alt_start, grams, &ch)?;
            let step = 1e-5;
            let mut grad_err: f64 = 0.0;
            for _ in 0..5 {
                let d = random_symmetric(&mut rng, dim);
                let plus = objective_at(&(&alt_start + &d * step), grams, &ch)?;
                let minus = objective_at(&(&alt_start - &d * step), grams, &ch)?;
                let fd = (plus - minus) / (2.0 * step);
                let analytic = grad.dot(&d);
                grad_err = grad_err.max((fd - analytic).abs() / analytic.abs());
            }
            Ok((monotone, agree, grad_err))
        })
        .collect();
    let mut all_monotone = true;
    let mut max_agree: f64 = 0.0;
    let mut max_grad: f64 = 0.0;
    for (&(i, e), r) in cases.iter().zip(results) {
        let (mono, agree, grad) = r?;
        b.metric(format!("i{i}_E{e}_start_gap"), agree);
        b.metric(format!("i{i}_E{e}_grad_err"), grad);
        all_monotone &= mono;
        max_agree = max_agree.max(agree);
        max_grad = max_grad.max(grad);
    }
    b.metric("monotone", f64::from(u8::from(all_monotone)));
    b.metric("max_start_gap", max_agree);
    b.metric("max_grad_err", max_grad);
    let pass = all_monotone && max_agree <= 1e-7 && max_grad <= 1e-5;
    let summary = format!(
        "{} solves, monotone: {all_monotone}, start-point gap {max_agree:.2e} (<= 1e-7), directional gradient error {max_grad:.2e} (<= 1e-5)",
        cases.len() * 2
    );
    Ok(b.finish(pass, summary))
}

/// Criterion 8: after training, the designed feature encoder beats
/// equal-power feature broadcast at every energy and approaches the
/// noiseless network at very high energy.
pub fn neural_extension(scale: &Scale, seed: u64) -> Result<Check> {
    let mut b = Builder::new(8, "nonlinear feature encoder", Some(300.0));
    let model = NonlinearModel::new(seed);
    let train_set = model.sample(scale.train_samples, seed)?;
    let test_set = model.sample(scale.test_samples, seed.wrapping_add(1))?;
    let net = MultiTaskNet::new(Architecture::STANDARD, seed)?;
    let opts = TrainOptions {
        epochs: scale.epochs,
        seed,
        ..TrainOptions::default()
    };
    let (net, history) = neural::train(&net, &train_set, &opts)?;
    let fs = neural::feature_stats(&net, &train_set)?;
    let heads = neural::linearize_heads(&net)?;
    let noiseless: f64 = net.task_mse(&test_set).iter().sum();
    b.metric("final_train_loss", *history.last().unwrap_or(&f64::NAN));
    b.metric("noiseless_test_mse", noiseless);
    b.metric("mean_predictor_mse", test_set.mean_predictor_mse());
    let channels = ChannelSet::random(heads.len(), 1.0, seed, crate::channel_eval::MIN_GAIN)?;
    let eval_seed = seed.wrapping_add(2);
    let mut losses = 0;
    let mut min_gain = f64::INFINITY;
    for &energy in &NEURAL_ENERGY_GRID {
        let ch = channels.with_energy(energy)?;
        let designed = neural::feature_encoder(&heads, &fs, &ch)?;
        let baseline = neural::equal_power_encoder(&heads, &fs, &ch)?;
        let d = neural::end_to_end_eval(
            &net,
            &fs,
            &designed,
            &ch,
            &test_set,
            scale.e2e_trials,
            eval_seed,
        )?;
        let e = neural::end_to_end_eval(
            &net,
            &fs,
            &baseline,
            &ch,
            &test_set,
            scale.e2e_trials,
            eval_seed,
        )?;
        b.metric(format!("E{energy}_designed"), d.sum_mse);
        b.metric(format!("E{energy}_equal_power"), e.sum_mse);
        if d.sum_mse >= e.sum_mse {
            losses += 1;
        }
        min_gain = min_gain.min(1.0 - d.sum_mse / e.sum_mse);
    }
    let ch = channels.with_energy(NEURAL_ASYMPTOTE_ENERGY)?;
    let designed = neural::feature_encoder(&heads, &fs, &ch)?;
    let high = neural::end_to_end_eval(
        &net,
        &fs,
        &designed,
        &ch,
        &test_set,
        scale.e2e_trials,
        eval_seed,
    )?;
    let rel = (high.sum_mse - noiseless).abs() / noiseless;
    b.metric("asymptote_rel_gap", rel);
    let pass = losses == 0 && rel <= 0.01;
    let summary = format!(
        "designed < equal-power at {}/{} energies (smallest gain {:.2}%), E=1e6 gap to noiseless {:.3}% (<= 1%)",
        NEURAL_ENERGY_GRID.len() - losses,
        NEURAL_ENERGY_GRID.len(),
        100.0 * min_gain,
        100.0 * rel
    );
    Ok(b.finish(pass, summary))
}

/// Criterion 9: every linear layer's analytic parameter gradient matches
/// central finite differences on 5 random parameters.
pub fn mlp_gradient_check(seed: u64) -> Result<Check> {
    let mut b = Builder::new(9, "MLP gradient check", None);
    let net = MultiTaskNet::new(Architecture::STANDARD, seed)?;
    let data = NonlinearModel::new(seed).sample(32, seed)?;
    let batch: Vec<usize> = (0..data.len()).collect();
    let (_, grad) = net.loss_and_grad(&data, &batch);
    let params = net.params();
    let mut layers = Vec::new();
    let mut offset = 0;
    let mut register = |label: String, mlp: &neural::Mlp| {
        for (k, layer) in mlp.layers.iter().enumerate() {
            if let Layer::Linear(l) = layer {
                let len = l.weight.len() + l.bias.len();
                layers.push((format!("{label}_layer{k}"), offset, len));
                offset += len;
            }
        }
    };
    register("trunk".into(), &net.trunk);
    for (n, h) in net.heads.iter().enumerate() {
        register(format!("head{n}"), h);
    }
    let mut rng = instance_rng(seed, 9, 0);
    let step = 1e-5;
    let mut worst: f64 = 0.0;
    for (label, start, len) in &layers {
        let mut layer_worst: f64 = 0.0;
        for _ in 0..5 {
            let k = start + rng.random_range(0..*len);
            let mut probe = net.clone();
            let mut p = params.clone();
            p[k] += step;
            probe.set_params(&p);
            let plus = probe.loss(&data, &batch);
            p[k] -= 2.0 * step;
            probe.set_params(&p);
            let minus = probe.loss(&data, &batch);
            let fd = (plus - minus) / (2.0 * step);
            let scale = fd.abs().max(grad[k].abs()).max(1e-8);
            layer_worst = layer_worst.max((fd - grad[k]).abs() / scale);
        }
        b.metric(format!("{label}_rel_err"), layer_worst);
        worst = worst.max(layer_worst);
    }
    b.metric("max_rel_err", worst);
    let summary = format!(
        "{} linear layers x 5 probes, max relative error {worst:.2e} (<= 1e-4)",
        layers.len()
    );
    Ok(b.finish(worst <= 1e-4, summary))
}

/// Criteria 1 to 9 in order.
pub fn run_suite(scale: &Scale, seed: u64) -> Result<Vec<Check>> {
    let sweep = linear_sweep(scale, seed)?;
    Ok(vec![
        single_user_optimality(scale, seed)?,
        diagonal_exactness(scale, seed)?,
        near_optimality(&sweep),
        baseline_ordering(&sweep),
        basis_comparison(&sweep),
        monte_carlo_agreement(scale, seed)?,
        reference_consistency(scale, seed)?,
        neural_extension(scale, seed)?,
        mlp_gradient_check(seed)?,
    ])
}

/// `criterion,metric,value` rows: numeric verdicts and metrics only.
pub fn suite_csv(checks: &[Check]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["criterion", "metric", "value"])?;
    for c in checks {
        let id = c.criterion.to_string();
        w.write_record([
            id.as_str(),
            "numeric_pass",
            if c.numeric_pass { "1" } else { "0" },
        ])?;
        for m in &c.metrics {
            w.write_record([id.as_str(), m.name.as_str(), m.value.to_string().as_str()])?;
        }
    }
    let bytes = w
        .into_inner()
        .map_err(|e| crate::Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Criterion 10: a second run of the suite reproduces `first_csv` byte for
/// byte.
pub fn determinism(first_csv: &str, scale: &Scale, seed: u64) -> Result<Check> {
    let b = Builder::new(10, "determinism", None);
    let second = suite_csv(&run_suite(scale, seed)?)?;
    let same = second == first_csv;
    let detail = if same {
        format!("repeated suite CSV identical ({} bytes)", first_csv.len())
    } else {
        let line = first_csv
            .lines()
            .zip(second.lines())
            .position(|(a, b)| a != b);
        format!("repeated suite CSV differs (first differing line {line:?})")
    };
    Ok(b.finish(same, detail))
}
