//! Minimal dense MLP with hand-written backpropagation.
//!
//! Parameters are stored per layer in row-major `out × in` weight buffers.
//! The flat parameter view (weights then bias, layer by layer) is what the
//! optimizer and the finite-difference checks operate on.

use serde::{Deserialize, Serialize};

use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major `out_dim × in_dim`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    /// Uniform in `±√(6/(fan_in + fan_out))`, zero bias.
    pub fn init(in_dim: usize, out_dim: usize, seed: u64, stream: u64) -> Self {
        use rand::Rng;
        let mut rng = rng::stream(seed, stream);
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weight = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self {
            in_dim,
            out_dim,
            weight,
            bias: vec![0.0; out_dim],
        }
    }

    pub fn forward_into(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..self.out_dim {
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            out.push(row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias[o]);
        }
    }

    fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layer {
    Linear(Linear),
    Tanh,
}

impl Layer {
    fn param_count(&self) -> usize {
        match self {
            Layer::Linear(l) => l.param_count(),
            Layer::Tanh => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

impl Mlp {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    /// Check that consecutive linear layers chain.
    pub fn validate(&self, input: usize) -> Result<usize, String> {
        let mut dim = input;
        for (i, layer) in self.layers.iter().enumerate() {
            if let Layer::Linear(l) = layer {
                if l.in_dim != dim {
                    return Err(format!("layer {i} expects {} inputs, gets {dim}", l.in_dim));
                }
                if l.weight.len() != l.in_dim * l.out_dim || l.bias.len() != l.out_dim {
                    return Err(format!("layer {i} has malformed parameter buffers"));
                }
                dim = l.out_dim;
            }
        }
        Ok(dim)
    }

    pub fn output_dim(&self, input: usize) -> usize {
        self.layers.iter().fold(input, |d, l| match l {
            Layer::Linear(l) => l.out_dim,
            Layer::Tanh => d,
        })
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Linear(l) => {
                    l.forward_into(&cur, &mut next);
                    std::mem::swap(&mut cur, &mut next);
                }
                Layer::Tanh => cur.iter_mut().for_each(|v| *v = v.tanh()),
            }
        }
        cur
    }

    /// Forward pass keeping every intermediate: `acts[0]` is the input and
    /// `acts[i + 1]` the output of layer `i`.
    pub fn forward_cached(&self, x: &[f64], acts: &mut Vec<Vec<f64>>) {
        acts.resize(self.layers.len() + 1, Vec::new());
        acts[0].clear();
        acts[0].extend_from_slice(x);
        for (i, layer) in self.layers.iter().enumerate() {
            let (done, rest) = acts.split_at_mut(i + 1);
            let input = &done[i];
            let out = &mut rest[0];
            match layer {
                Layer::Linear(l) => l.forward_into(input, out),
                Layer::Tanh => {
                    out.clear();
                    out.extend(input.iter().map(|v| v.tanh()));
                }
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            if let Layer::Linear(l) = layer {
                out.extend_from_slice(&l.weight);
                out.extend_from_slice(&l.bias);
            }
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) {
        let mut at = 0;
        for layer in &mut self.layers {
            if let Layer::Linear(l) = layer {
                let nw = l.weight.len();
                l.weight.copy_from_slice(&flat[at..at + nw]);
                at += nw;
                let nb = l.bias.len();
                l.bias.copy_from_slice(&flat[at..at + nb]);
                at += nb;
            }
        }
        debug_assert_eq!(at, flat.len());
    }

    /// Backpropagate `grad_out` (d loss / d output) through cached
    /// activations, accumulating parameter gradients into `grads` (flat
    /// layout of [`Mlp::params`]). Returns d loss / d input.
    pub fn backward(&self, acts: &[Vec<f64>], grad_out: &[f64], grads: &mut [f64]) -> Vec<f64> {
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut at = 0;
        for layer in &self.layers {
            offsets.push(at);
            at += layer.param_count();
        }
        let mut g = grad_out.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            match layer {
                Layer::Tanh => {
                    for (gv, y) in g.iter_mut().zip(&acts[i + 1]) {
                        *gv *= 1.0 - y * y;
                    }
                }
                Layer::Linear(l) => {
                    let input = &acts[i];
                    let base = offsets[i];
                    let (gw, gb) = grads[base..base + l.param_count()].split_at_mut(l.weight.len());
                    let mut gin = vec![0.0; l.in_dim];
                    for o in 0..l.out_dim {
                        let go = g[o];
                        gb[o] += go;
                        if go == 0.0 {
                            continue;
                        }
                        let row = &l.weight[o * l.in_dim..(o + 1) * l.in_dim];
                        let grow = &mut gw[o * l.in_dim..(o + 1) * l.in_dim];
                        for k in 0..l.in_dim {
                            grow[k] += go * input[k];
                            gin[k] += go * row[k];
                        }
                    }
                    g = gin;
                }
            }
        }
        g
    }
}

/// Adaptive-moment optimizer state over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}
