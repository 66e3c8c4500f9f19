//! Seed derivation for reproducible, order-independent random streams.
//!
//! Every stochastic draw during training comes from a stream keyed by
//! `(master seed, step, example, draw)`, so evaluating examples in a different
//! order or on another thread cannot change results.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a list of keys into one 64-bit seed.
pub fn derive_seed(master: u64, keys: &[u64]) -> u64 {
    keys.iter()
        .fold(splitmix64(master), |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

/// Generator for draw `draw` of example `example` at training step `step`.
pub fn stream_rng(master: u64, step: u64, example: u64, draw: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, &[step, example, draw]))
}

/// Generator for a named, non-training purpose (data synthesis, evaluation).
pub fn purpose_rng(master: u64, purpose: &str) -> ChaCha8Rng {
    let tag = purpose
        .bytes()
        .fold(0xCBF2_9CE4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01B3));
    ChaCha8Rng::seed_from_u64(derive_seed(master, &[u64::MAX, tag]))
}

pub fn standard_normal_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_distinct_and_reproducible() {
        let a: f64 = stream_rng(7, 1, 2, 0).sample(StandardNormal);
        let b: f64 = stream_rng(7, 1, 2, 0).sample(StandardNormal);
        let c: f64 = stream_rng(7, 1, 2, 1).sample(StandardNormal);
        let d: f64 = stream_rng(7, 2, 1, 0).sample(StandardNormal);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
        assert_ne!(derive_seed(1, &[0]), derive_seed(2, &[0]));
    }
}
