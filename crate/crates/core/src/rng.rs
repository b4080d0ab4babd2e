//! Seeded randomness.
//!
//! All randomness flows from one root seed through ChaCha8, a counter-based
//! stream cipher generator. Independent consumers (parameter init, data
//! generation, shuffling, search) derive their own stream with [`substream`],
//! so adding draws in one consumer never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub type Rng = ChaCha8Rng;

/// Stream identifiers used across the crate.
pub mod stream {
    pub const INIT_IMG: u64 = 1;
    pub const INIT_TXT: u64 = 2;
    pub const INIT_FUSION: u64 = 3;
    pub const INIT_HEAD: u64 = 4;
    pub const DATA_TRAIN: u64 = 10;
    pub const DATA_VAL: u64 = 11;
    pub const SHUFFLE: u64 = 20;
    pub const SEARCH: u64 = 30;
    pub const GRADCHECK: u64 = 40;
}

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// A generator for stream `stream` of root seed `seed`.
pub fn substream(seed: u64, stream: u64) -> Rng {
    let mut rng = Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn gaussian_vec(rng: &mut Rng, n: usize, mean: f64, std: f64) -> Vec<f64> {
    let dist = Normal::new(mean, std).expect("std must be finite and non-negative");
    (0..n).map(|_| dist.sample(rng)).collect()
}

pub fn uniform_vec(rng: &mut Rng, n: usize, bound: f64) -> Vec<f64> {
    use rand::Rng as _;
    (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
}
