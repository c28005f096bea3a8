//! Synthetic nonlinear three-task data: `y = C·z + v` with targets given by
//! fixed closed-form functions of `z`.

use serde::{Deserialize, Serialize};

use crate::linalg::{serde_matrix, Mat};
use crate::rng::{self, streams};
use crate::{Error, Result};

pub const LATENT_DIM: usize = 8;
pub const OBSERVATION_DIM: usize = 20;
pub const TASKS: usize = 3;
pub const TARGET_DIM: usize = 3;

/// Targets of the three tasks at latent point `z` (at least 5 entries used).
pub fn targets(z: &[f64]) -> [[f64; TARGET_DIM]; TASKS] {
    let relu1 = z[1].max(0.0);
    let bump = (-z[2] * z[2]).exp();
    [
        [
            2.0 * z[0].sin() + relu1 + 0.5 * bump,
            relu1 + 3.0 * bump,
            z[0].sin() - bump,
        ],
        [
            0.3 * z[4] * z[4] + 2.0 * z[1].cos(),
            -0.2 * relu1 + 3.0 * bump,
            (0.01 * z[0]).sin() + z[3].atan(),
        ],
        [
            2.0 * z[1] + 0.1 * z[3].sin(),
            2.0 * z[0].sin() - 0.05 * z[3].atan() + z[1].abs(),
            relu1,
        ],
    ]
}

/// The fixed observation matrix `C`, shared by every split drawn from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NonlinearModel {
    #[serde(with = "serde_matrix")]
    pub mixing: Mat,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NonlinearDataset {
    /// `count × 20`.
    pub y: Mat,
    /// One `count × 3` block per task.
    pub x: Vec<Mat>,
    /// `count × 8`.
    pub z: Mat,
    pub seed: u64,
}

impl NonlinearModel {
    pub fn new(seed: u64) -> Self {
        let mut rng = rng::stream(seed, streams::OBSERVATION_MIX);
        let mut data = vec![0.0; OBSERVATION_DIM * LATENT_DIM];
        rng::fill_normal(&mut rng, &mut data);
        Self {
            mixing: Mat::from_row_slice(OBSERVATION_DIM, LATENT_DIM, &data),
            seed,
        }
    }

    /// `count` samples; sample `i` depends only on `(seed, i)`.
    pub fn sample(&self, count: usize, seed: u64) -> Result<NonlinearDataset> {
        if count == 0 {
            return Err(Error::Argument("dataset needs at least one sample".into()));
        }
        let mut y = Mat::zeros(count, OBSERVATION_DIM);
        let mut z = Mat::zeros(count, LATENT_DIM);
        let mut x = vec![Mat::zeros(count, TARGET_DIM); TASKS];
        let mut zi = [0.0; LATENT_DIM];
        let mut vi = [0.0; OBSERVATION_DIM];
        for i in 0..count {
            let mut rng = rng::stream(seed, streams::SAMPLES_BASE + i as u64);
            rng::fill_normal(&mut rng, &mut zi);
            rng::fill_normal(&mut rng, &mut vi);
            for r in 0..OBSERVATION_DIM {
                let mut acc = vi[r];
                for c in 0..LATENT_DIM {
                    acc += self.mixing[(r, c)] * zi[c];
                }
                y[(i, r)] = acc;
            }
            for c in 0..LATENT_DIM {
                z[(i, c)] = zi[c];
            }
            for (block, t) in x.iter_mut().zip(targets(&zi)) {
                for (c, v) in t.into_iter().enumerate() {
                    block[(i, c)] = v;
                }
            }
        }
        Ok(NonlinearDataset { y, x, z, seed })
    }
}

impl NonlinearDataset {
    pub fn len(&self) -> usize {
        self.y.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.y.nrows() == 0
    }

    /// Row `i` of `y` as a contiguous vector.
    pub fn input(&self, i: usize) -> Vec<f64> {
        self.y.row(i).iter().copied().collect()
    }

    pub fn target(&self, task: usize, i: usize) -> Vec<f64> {
        self.x[task].row(i).iter().copied().collect()
    }

    /// `Σ_n Tr(cov(x_n))`: the sum-MSE of predicting each target by its mean.
    pub fn mean_predictor_mse(&self) -> f64 {
        let count = self.len() as f64;
        self.x
            .iter()
            .map(|block| {
                block
                    .column_iter()
                    .map(|col| {
                        let mean = col.sum() / count;
                        col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count
                    })
                    .sum::<f64>()
            })
            .sum()
    }
}

/// Draw `C` and the samples from the same seed.
pub fn synth_nonlinear_dataset(count: usize, seed: u64) -> Result<NonlinearDataset> {
    NonlinearModel::new(seed).sample(count, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn targets_at_origin() {
        let t = targets(&[0.0; LATENT_DIM]);
        assert_eq!(t[0], [0.5, 3.0, -1.0]);
        assert_eq!(t[1], [2.0, 3.0, 0.0]);
        assert_eq!(t[2], [0.0, 0.0, 0.0]);
    }

    #[test]
    fn targets_follow_latents() {
        let d = synth_nonlinear_dataset(16, 5).unwrap();
        for i in 0..d.len() {
            let z: Vec<f64> = d.z.row(i).iter().copied().collect();
            let t = targets(&z);
            for n in 0..TASKS {
                assert_eq!(d.target(n, i), t[n].to_vec());
            }
        }
    }

    #[test]
    fn reproducible_and_prefix_stable() {
        let a = synth_nonlinear_dataset(20, 9).unwrap();
        assert_eq!(a, synth_nonlinear_dataset(20, 9).unwrap());
        let b = synth_nonlinear_dataset(5, 9).unwrap();
        assert_eq!(a.y.rows(0, 5), b.y.rows(0, 5));
        assert_ne!(a.y, synth_nonlinear_dataset(20, 10).unwrap().y);
    }

    #[test]
    fn splits_share_mixing() {
        let m = NonlinearModel::new(3);
        let train = m.sample(10, 100).unwrap();
        let test = m.sample(10, 101).unwrap();
        assert_ne!(train.y, test.y);
        assert!(m.sample(0, 1).is_err());
    }
}
