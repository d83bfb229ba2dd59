//! Deterministic seed derivation and Gaussian sampling for ensemble work.
//!
//! Per-trajectory streams are derived counter-style from `(master_seed, index)`,
//! so member `i` of an ensemble sees the same draws no matter which worker
//! integrates it or in which order members are scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer: full-avalanche 64-bit mixing.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive the stream seed for ensemble member `index` from `master`.
pub fn split_seed(master: u64, index: u64) -> u64 {
    mix64(master ^ mix64(index.wrapping_add(0x517c_c1b7_2722_0a95)))
}

/// Deterministic generator for a (derived) seed.
pub fn stream(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Fill `out` with independent standard normal draws.
pub fn fill_standard_normal<R: rand::Rng>(rng: &mut R, out: &mut [f64]) {
    use rand_distr::{Distribution, StandardNormal};
    for x in out.iter_mut() {
        *x = StandardNormal.sample(rng);
    }
}

/// One standard normal draw.
pub fn standard_normal<R: rand::Rng>(rng: &mut R) -> f64 {
    use rand_distr::{Distribution, StandardNormal};
    StandardNormal.sample(rng)
}

/// One standard exponential draw (mean 1).
pub fn standard_exponential<R: rand::Rng>(rng: &mut R) -> f64 {
    use rand_distr::{Distribution, Exp1};
    Exp1.sample(rng)
}
