//! Counter-based random streams.
//!
//! Every random draw in the crate comes from a ChaCha stream addressed by a
//! `(seed, stream)` pair, so a sample's value depends only on its index and
//! never on how work is scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn normal<R: rand::Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

pub fn fill_normal<R: rand::Rng>(rng: &mut R, out: &mut [f64]) {
    for v in out {
        *v = normal(rng);
    }
}

/// Well-separated stream ids for the independent draws of one experiment.
pub mod streams {
    pub const OBSERVATION_MIX: u64 = 0;
    pub const SUBSPACE: u64 = 1;
    pub const TASK_MAP_BASE: u64 = 2;
    pub const LAYER_INIT_BASE: u64 = 1 << 16;
    pub const CHANNEL: u64 = 1 << 20;
    pub const EPOCH_SHUFFLE_BASE: u64 = 1 << 24;
    pub const SAMPLES_BASE: u64 = 1 << 32;
    pub const LINK_NOISE_BASE: u64 = 1 << 44;
}
