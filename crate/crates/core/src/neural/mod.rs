//! Nonlinear extension: a shared-trunk multi-task MLP whose features are
//! whitened and broadcast with the linear encoder machinery.
//!
//! After training, the first linear layer `A_n` of each head is treated as
//! a linear task on the whitened feature `q̃ = Σ_q^{-1/2}(q − μ_q)`, so the
//! encoder is designed exactly as in the Gaussian case with cross matrices
//! `A_n Σ_q^{1/2}`. Each user estimates `q̃` with a per-feature linear MMSE
//! rule, restores `q̂ = Σ_q^{1/2} q̂̃ + μ_q` and runs its head on it.

pub mod dataset;
pub mod mlp;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel_eval::{mean_and_se, EvalMode, EvalReport, MonteCarloStats, SweepRow};
use crate::design::{self, BasisMethod, Encoder};
use crate::linalg::{self, serde_matrix, Mat};
use crate::model::ChannelSet;
use crate::rng::{self, streams};
use crate::{Error, Result};

pub use dataset::{synth_nonlinear_dataset, NonlinearDataset, NonlinearModel};
pub use mlp::{Adam, Layer, Linear, Mlp};

/// Layer widths of a trunk `input → hidden → feature` and heads
/// `feature → head_hidden → output`, all with tanh between linear layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub input: usize,
    pub hidden: usize,
    pub feature: usize,
    pub head_hidden: usize,
    pub output: usize,
    pub heads: usize,
}

impl Architecture {
    /// 20 → 16 → 12 trunk, three 12 → 8 → 3 heads.
    pub const STANDARD: Architecture = Architecture {
        input: 20,
        hidden: 16,
        feature: 12,
        head_hidden: 8,
        output: 3,
        heads: 3,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultiTaskNet {
    pub trunk: Mlp,
    pub heads: Vec<Mlp>,
    pub input_dim: usize,
    pub seed: u64,
}

impl MultiTaskNet {
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        let a = arch;
        if [
            a.input,
            a.hidden,
            a.feature,
            a.head_hidden,
            a.output,
            a.heads,
        ]
        .contains(&0)
        {
            return Err(Error::Dimension(format!(
                "all layer widths must be positive, got {a:?}"
            )));
        }
        let mut stream = streams::LAYER_INIT_BASE;
        let mut linear = |i, o| {
            let l = Linear::init(i, o, seed, stream);
            stream += 1;
            Layer::Linear(l)
        };
        let trunk = Mlp::new(vec![
            linear(a.input, a.hidden),
            Layer::Tanh,
            linear(a.hidden, a.feature),
            Layer::Tanh,
        ]);
        let heads = (0..a.heads)
            .map(|_| {
                Mlp::new(vec![
                    linear(a.feature, a.head_hidden),
                    Layer::Tanh,
                    linear(a.head_hidden, a.output),
                ])
            })
            .collect();
        Ok(Self {
            trunk,
            heads,
            input_dim: a.input,
            seed,
        })
    }

    /// Check layer chaining and that every head starts with a linear layer.
    pub fn validate(&self) -> Result<()> {
        let feature = self
            .trunk
            .validate(self.input_dim)
            .map_err(|e| Error::Structure(format!("trunk: {e}")))?;
        if self.heads.is_empty() {
            return Err(Error::Structure("network has no heads".into()));
        }
        for (n, head) in self.heads.iter().enumerate() {
            head.validate(feature)
                .map_err(|e| Error::Structure(format!("head {n}: {e}")))?;
            if !matches!(head.layers.first(), Some(Layer::Linear(_))) {
                return Err(Error::Structure(format!(
                    "head {n} does not start with a linear layer"
                )));
            }
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.trunk.output_dim(self.input_dim)
    }

    pub fn tasks(&self) -> usize {
        self.heads.len()
    }

    pub fn features(&self, y: &[f64]) -> Vec<f64> {
        self.trunk.forward(y)
    }

    pub fn predict(&self, y: &[f64]) -> Vec<Vec<f64>> {
        let q = self.features(y);
        self.heads.iter().map(|h| h.forward(&q)).collect()
    }

    pub fn param_count(&self) -> usize {
        self.trunk.param_count() + self.heads.iter().map(Mlp::param_count).sum::<usize>()
    }

    /// Trunk parameters followed by each head's, in [`Mlp::params`] layout.
    pub fn params(&self) -> Vec<f64> {
        let mut p = self.trunk.params();
        for h in &self.heads {
            p.extend(h.params());
        }
        p
    }

    pub fn set_params(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count(), "parameter vector length");
        let mut at = self.trunk.param_count();
        self.trunk.set_params(&flat[..at]);
        for h in &mut self.heads {
            let len = h.param_count();
            h.set_params(&flat[at..at + len]);
            at += len;
        }
    }

    /// Mean over `indices` of `Σ_n ‖x_n − f_n(g(y))‖²` and its gradient.
    pub fn loss_and_grad(&self, data: &NonlinearDataset, indices: &[usize]) -> (f64, Vec<f64>) {
        let mut grads = vec![0.0; self.param_count()];
        let loss = self.accumulate(data, indices, &mut grads);
        (loss, grads)
    }

    pub fn loss(&self, data: &NonlinearDataset, indices: &[usize]) -> f64 {
        let scale = 1.0 / indices.len() as f64;
        indices
            .iter()
            .map(|&i| {
                let y = data.input(i);
                self.predict(&y)
                    .iter()
                    .enumerate()
                    .map(|(n, out)| sq_dist(out, &data.target(n, i)))
                    .sum::<f64>()
            })
            .sum::<f64>()
            * scale
    }

    fn accumulate(&self, data: &NonlinearDataset, indices: &[usize], grads: &mut [f64]) -> f64 {
        let scale = 1.0 / indices.len() as f64;
        let trunk_len = self.trunk.param_count();
        let (trunk_grads, mut head_grads) = grads.split_at_mut(trunk_len);
        let mut head_slices: Vec<&mut [f64]> = Vec::with_capacity(self.heads.len());
        for h in &self.heads {
            let (this, rest) = head_grads.split_at_mut(h.param_count());
            head_slices.push(this);
            head_grads = rest;
        }
        let mut trunk_acts = Vec::new();
        let mut head_acts = Vec::new();
        let mut y = vec![0.0; self.input_dim];
        let mut loss = 0.0;
        for &i in indices {
            for (dst, src) in y.iter_mut().zip(data.y.row(i).iter()) {
                *dst = *src;
            }
            self.trunk.forward_cached(&y, &mut trunk_acts);
            let q = trunk_acts.last().expect("trunk has layers").clone();
            let mut grad_q = vec![0.0; q.len()];
            for (n, head) in self.heads.iter().enumerate() {
                head.forward_cached(&q, &mut head_acts);
                let out = head_acts.last().expect("head has layers");
                let target = data.x[n].row(i);
                let mut gout = Vec::with_capacity(out.len());
                for (k, o) in out.iter().enumerate() {
                    let diff = o - target[k];
                    loss += diff * diff;
                    gout.push(2.0 * diff * scale);
                }
                let gq = head.backward(&head_acts, &gout, head_slices[n]);
                for (a, b) in grad_q.iter_mut().zip(gq) {
                    *a += b;
                }
            }
            self.trunk.backward(&trunk_acts, &grad_q, trunk_grads);
        }
        loss * scale
    }

    /// Per-task mean squared error of the noiseless network.
    pub fn task_mse(&self, data: &NonlinearDataset) -> Vec<f64> {
        let rows: Vec<Vec<f64>> = (0..data.len())
            .into_par_iter()
            .map(|i| {
                self.predict(&data.input(i))
                    .iter()
                    .enumerate()
                    .map(|(n, out)| sq_dist(out, &data.target(n, i)))
                    .collect()
            })
            .collect();
        (0..self.tasks())
            .map(|n| mean_and_se(&rows.iter().map(|r| r[n]).collect::<Vec<_>>()).0)
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let net: Self = serde_json::from_str(s)?;
        net.validate()?;
        Ok(net)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Seeds the per-epoch shuffles.
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 2000,
            batch: 128,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

/// Minibatch Adam on the summed per-task squared error. Returns the trained
/// network and the mean training loss of each epoch.
pub fn train(
    net: &MultiTaskNet,
    data: &NonlinearDataset,
    opts: &TrainOptions,
) -> Result<(MultiTaskNet, Vec<f64>)> {
    net.validate()?;
    if data.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    if data.y.ncols() != net.input_dim || data.x.len() != net.tasks() {
        return Err(Error::Dimension(
            "dataset does not match the network".into(),
        ));
    }
    if opts.batch == 0 {
        return Err(Error::Argument("batch size must be positive".into()));
    }
    let mut net = net.clone();
    let mut params = net.params();
    let mut adam = Adam::new(params.len(), opts.lr, opts.beta1, opts.beta2, opts.eps);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut grads = vec![0.0; params.len()];
    let mut history = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        let mut rng = rng::stream(opts.seed, streams::EPOCH_SHUFFLE_BASE + epoch as u64);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(opts.batch) {
            grads.iter_mut().for_each(|g| *g = 0.0);
            let loss = net.accumulate(data, batch, &mut grads);
            if !loss.is_finite() {
                history.push(loss);
                return Err(Error::Training { epoch, history });
            }
            total += loss * batch.len() as f64;
            adam.step(&mut params, &grads);
            net.set_params(&params);
        }
        history.push(total / data.len() as f64);
    }
    Ok((net, history))
}

/// Relative eigenvalue floor of the feature whitener.
pub const FEATURE_FLOOR_REL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    #[serde(with = "serde_matrix")]
    pub covariance: Mat,
    /// Pseudo inverse square root of the covariance.
    #[serde(with = "serde_matrix")]
    pub whitener: Mat,
    #[serde(with = "serde_matrix")]
    pub sqrt: Mat,
    /// Absolute eigenvalue cutoff used by the whitener.
    pub floor: f64,
}

impl FeatureStats {
    /// Empirical mean and (biased) covariance of the rows of `features`.
    pub fn from_features(features: &Mat) -> Result<Self> {
        let count = features.nrows();
        if count == 0 {
            return Err(Error::Argument("no features to summarize".into()));
        }
        let mean_row = features.row_mean();
        let centered = Mat::from_fn(count, features.ncols(), |r, c| {
            features[(r, c)] - mean_row[c]
        });
        let covariance = linalg::symmetrize(&(centered.transpose() * &centered / count as f64));
        let (values, _) = linalg::sym_eigen_desc(&covariance);
        let floor = FEATURE_FLOOR_REL * values.iter().copied().fold(0.0, f64::max);
        Ok(Self {
            mean: mean_row.iter().copied().collect(),
            whitener: linalg::pinv_sqrt(&covariance, floor),
            sqrt: linalg::sqrt_psd(&covariance),
            covariance,
            floor,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `Σ_q^{-1/2}(q − μ_q)`.
    pub fn whiten(&self, q: &[f64]) -> Vec<f64> {
        let centered: Vec<f64> = q.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        mat_vec(&self.whitener, &centered)
    }

    /// `Σ_q^{1/2} q̃ + μ_q`.
    pub fn restore(&self, q_white: &[f64]) -> Vec<f64> {
        let mut q = mat_vec(&self.sqrt, q_white);
        q.iter_mut().zip(&self.mean).for_each(|(a, m)| *a += m);
        q
    }
}

fn mat_vec(m: &Mat, v: &[f64]) -> Vec<f64> {
    (0..m.nrows())
        .map(|r| (0..m.ncols()).map(|c| m[(r, c)] * v[c]).sum())
        .collect()
}

/// Trunk features of every sample, `count × D_q`.
pub fn features_of(net: &MultiTaskNet, data: &NonlinearDataset) -> Mat {
    let rows: Vec<Vec<f64>> = (0..data.len())
        .into_par_iter()
        .map(|i| net.features(&data.input(i)))
        .collect();
    let dim = net.feature_dim();
    Mat::from_fn(rows.len(), dim, |r, c| rows[r][c])
}

pub fn feature_stats(net: &MultiTaskNet, data: &NonlinearDataset) -> Result<FeatureStats> {
    FeatureStats::from_features(&features_of(net, data))
}

/// Weight matrix of each head's first linear layer.
pub fn linearize_heads(net: &MultiTaskNet) -> Result<Vec<Mat>> {
    net.heads
        .iter()
        .enumerate()
        .map(|(n, head)| match head.layers.first() {
            Some(Layer::Linear(l)) => Ok(Mat::from_row_slice(l.out_dim, l.in_dim, &l.weight)),
            _ => Err(Error::Structure(format!(
                "head {n} does not start with a linear layer"
            ))),
        })
        .collect()
}

fn feature_cross(heads: &[Mat], fs: &FeatureStats, channels: &ChannelSet) -> Result<Vec<Mat>> {
    if heads.len() != channels.users() {
        return Err(Error::Dimension(format!(
            "{} heads for {} users",
            heads.len(),
            channels.users()
        )));
    }
    if let Some(a) = heads.iter().find(|a| a.ncols() != fs.dim()) {
        return Err(Error::Dimension(format!(
            "head matrix has {} columns, features have {}",
            a.ncols(),
            fs.dim()
        )));
    }
    Ok(heads.iter().map(|a| a * &fs.sqrt).collect())
}

/// Encoder over whitened features: right singular vectors of the stacked
/// `A_n Σ_q^{1/2}` as basis, importance `‖A_n Σ_q^{1/2} p_d‖²`, then the
/// Lagrangian energy allocation.
pub fn feature_encoder(heads: &[Mat], fs: &FeatureStats, channels: &ChannelSet) -> Result<Encoder> {
    let cross = feature_cross(heads, fs, channels)?;
    let basis = design::shared_basis_from_cross(&cross, &vec![1.0; cross.len()], BasisMethod::Svd)?;
    design::encoder_for_basis(&cross, basis, channels)
}

/// Broadcast of every whitened feature with energy `E / D_q` (β is 0: no
/// optimization is involved).
pub fn equal_power_encoder(
    heads: &[Mat],
    fs: &FeatureStats,
    channels: &ChannelSet,
) -> Result<Encoder> {
    let cross = feature_cross(heads, fs, channels)?;
    let dim = fs.dim();
    let basis = Mat::identity(dim, dim);
    let importance = design::importance_from_cross(&cross, &basis);
    let energies = vec![channels.energy / dim as f64; dim];
    Ok(Encoder::assemble(basis, energies, importance, 0.0))
}

/// Whitened-feature coordinates `p_dᵀ q̃` of one observation.
pub fn feature_coordinates(
    net: &MultiTaskNet,
    fs: &FeatureStats,
    encoder: &Encoder,
    y: &[f64],
) -> Vec<f64> {
    let qt = fs.whiten(&net.features(y));
    encoder
        .basis
        .column_iter()
        .map(|p| p.iter().zip(&qt).map(|(a, b)| a * b).sum())
        .collect()
}

/// Estimate of user `n`'s target from the feature coordinates, given one
/// unit-variance noise value per feature: `r_d = h√w_d·c_d + u_d`,
/// `ĉ_d = h√w_d/(h²w_d + 1)·r_d`, then `q̂ = Σ_q^{1/2}Pĉ + μ_q` through
/// the head.
pub fn decode_user(
    net: &MultiTaskNet,
    fs: &FeatureStats,
    encoder: &Encoder,
    gain: f64,
    user: usize,
    coords: &[f64],
    noise: &[f64],
) -> Vec<f64> {
    let dim = encoder.input_dim();
    let mut est = vec![0.0; dim];
    for d in 0..dim {
        let w = encoder.energies[d];
        if w <= 0.0 {
            continue;
        }
        let amp = gain * w.sqrt();
        let coef = amp / (amp * amp + 1.0) * (amp * coords[d] + noise[d]);
        for (e, p) in est.iter_mut().zip(encoder.basis.column(d).iter()) {
            *e += coef * p;
        }
    }
    net.heads[user].forward(&fs.restore(&est))
}

/// End-to-end Monte-Carlo sum-MSE over a test set: every sample is sent
/// `trials` times; sample `i`, trial `t` draws its link noise from its own
/// stream, so encoders evaluated with the same seed see identical noise.
/// Standard errors are over per-sample trial averages; the floor is the
/// noiseless network error on the same set.
pub fn end_to_end_eval(
    net: &MultiTaskNet,
    fs: &FeatureStats,
    encoder: &Encoder,
    channels: &ChannelSet,
    test: &NonlinearDataset,
    trials: usize,
    seed: u64,
) -> Result<EvalReport> {
    if trials == 0 || test.is_empty() {
        return Err(Error::Argument(
            "need at least one sample and one trial".into(),
        ));
    }
    if channels.users() != net.tasks()
        || encoder.input_dim() != fs.dim()
        || fs.dim() != net.feature_dim()
    {
        return Err(Error::Dimension(
            "network, feature statistics, encoder and channels disagree".into(),
        ));
    }
    let users = net.tasks();
    let dim = fs.dim();
    // per sample: trial-averaged user errors, transmitted energy, noiseless user errors
    let rows: Vec<Vec<f64>> = (0..test.len())
        .into_par_iter()
        .map(|i| {
            let y = test.input(i);
            let coords = feature_coordinates(net, fs, encoder, &y);
            let targets: Vec<Vec<f64>> = (0..users).map(|n| test.target(n, i)).collect();
            let mut out = vec![0.0; 2 * users + 1];
            let mut noise = vec![0.0; dim];
            for t in 0..trials {
                let id = (i * trials + t) as u64;
                let mut rng = rng::stream(seed, streams::LINK_NOISE_BASE + id);
                for (n, &h) in channels.gains.iter().enumerate() {
                    rng::fill_normal(&mut rng, &mut noise);
                    let est = decode_user(net, fs, encoder, h, n, &coords, &noise);
                    out[n] += sq_dist(&est, &targets[n]) / trials as f64;
                }
            }
            out[users] = coords
                .iter()
                .zip(&encoder.energies)
                .map(|(c, w)| w * c * c)
                .sum();
            for (n, pred) in net.predict(&y).iter().enumerate() {
                out[users + 1 + n] = sq_dist(pred, &targets[n]);
            }
            out
        })
        .collect();
    let column = |k: usize| -> Vec<f64> { rows.iter().map(|r| r[k]).collect() };
    let mut per_user_mse = Vec::with_capacity(users);
    let mut per_user_se = Vec::with_capacity(users);
    for n in 0..users {
        let (m, se) = mean_and_se(&column(n));
        per_user_mse.push(m);
        per_user_se.push(se);
    }
    let sums: Vec<f64> = rows.iter().map(|r| r[..users].iter().sum()).collect();
    let (sum_mse, sum_se) = mean_and_se(&sums);
    let (mean_energy, energy_se) = mean_and_se(&column(users));
    let mse_floor = (0..users)
        .map(|n| mean_and_se(&column(users + 1 + n)).0)
        .collect();
    Ok(EvalReport {
        per_user_mse,
        sum_mse,
        mse_floor,
        method_tag: "feature-encoder".into(),
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

/// Designed feature encoder and equal-power broadcast at every energy, as
/// Monte-Carlo rows tagged `feature-encoder` and `equal-power`. Both methods
/// share the link noise of each energy.
pub fn feature_sweep(
    net: &MultiTaskNet,
    fs: &FeatureStats,
    channels: &ChannelSet,
    test: &NonlinearDataset,
    energies: &[f64],
    trials: usize,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    let heads = linearize_heads(net)?;
    let mut rows = Vec::new();
    for &energy in energies {
        let ch = channels.with_energy(energy)?;
        let designs = [
            ("feature-encoder", feature_encoder(&heads, fs, &ch)?),
            ("equal-power", equal_power_encoder(&heads, fs, &ch)?),
        ];
        for (tag, enc) in designs {
            let report = end_to_end_eval(net, fs, &enc, &ch, test, trials, seed)?;
            let mc = report
                .monte_carlo
                .as_ref()
                .expect("end-to-end evaluation is Monte-Carlo");
            for n in 0..=report.per_user_mse.len() {
                let (value, se) = if n < report.per_user_mse.len() {
                    (report.per_user_mse[n], mc.per_user_se[n])
                } else {
                    (report.sum_mse, mc.sum_se)
                };
                rows.push(SweepRow {
                    method: tag.into(),
                    energy,
                    user: (n < report.per_user_mse.len()).then_some(n),
                    mse_analytic: None,
                    mse_mc: Some(value),
                    mc_se: Some(se),
                    seed,
                });
            }
        }
    }
    Ok(rows)
}

/// Trained network plus the feature statistics it was whitened with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub net: MultiTaskNet,
    pub feature_stats: Option<FeatureStats>,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cp: Self = serde_json::from_str(s)?;
        cp.net.validate()?;
        if let Some(fs) = &cp.feature_stats {
            if fs.dim() != cp.net.feature_dim() {
                return Err(Error::Structure(
                    "feature statistics do not match the network".into(),
                ));
            }
        }
        Ok(cp)
    }
}
