//! Seeded random streams.
//!
//! Every consumer of randomness derives its own ChaCha stream from a root
//! seed and a fixed stream id, so that adding draws in one place (say, the
//! VSD auxiliary update) never shifts the noise seen by another (the
//! per-iteration `(t, eps)` pair).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

/// Stream ids used by the distillation engine and the CLI.
pub mod streams {
    pub const TIMESTEP: u64 = 1;
    pub const NOISE: u64 = 2;
    pub const GENERATOR_INIT: u64 = 3;
    pub const AUX: u64 = 4;
    pub const TRAIN: u64 = 5;
    pub const DATASET: u64 = 6;
    pub const PROBE: u64 = 7;
    pub const SAMPLE: u64 = 8;
}

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rng_stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Sub-seed for draw `index` of a Monte-Carlo loop, independent of the
/// order in which draws are evaluated.
pub fn draw_rng(seed: u64, stream: u64, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(stream);
    rng
}

pub fn standard_normal(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn fill_standard_normal(rng: &mut Rng, out: &mut [f64]) {
    for v in out.iter_mut() {
        *v = StandardNormal.sample(rng);
    }
}
