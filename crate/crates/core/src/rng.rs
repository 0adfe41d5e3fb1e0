//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! keyed by a splitmix64 mix of the user seed and a stream tag, so results
//! do not depend on platform or call order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::scalar::Scalar;

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ stream.wrapping_mul(0xd1b5_4a32_d192_ed03))
}

pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream))
}

/// He-normal samples (`σ = √(2 / fan_in)`), drawn in f64 so f32 and f64
/// models built from one seed agree up to rounding.
pub fn he_normal<T: Scalar>(rng: &mut ChaCha8Rng, count: usize, fan_in: usize) -> Vec<T> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("finite std");
    (0..count).map(|_| T::lit(dist.sample(rng))).collect()
}
