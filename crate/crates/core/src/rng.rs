//! Seeded randomness.
//!
//! Every random decision in the pipeline goes through SplitMix64
//! (Steele, Lea & Flood 2014: add 0x9E3779B97F4A7C15, then two
//! xor-shift/multiply rounds with constants 0xBF58476D1CE4E5B9 and
//! 0x94D049BB133111EB). Child seeds are derived with [`derive_seed`], so a
//! run is fully determined by its top-level seed.

use rand::{Rng, SeedableRng};
pub use rand_xoshiro::SplitMix64;

/// Creates the generator for `seed`.
pub fn rng(seed: u64) -> SplitMix64 {
    SplitMix64::seed_from_u64(seed)
}

/// Deterministic child seed: the first SplitMix64 output for
/// `seed ^ (stream * 0x9E3779B97F4A7C15)`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut r = rng(seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    r.random::<u64>()
}

/// Fisher-Yates shuffle drawing `j` uniformly from `0..=i` for `i` from the
/// back of the slice.
pub fn shuffle<T>(items: &mut [T], seed: u64) {
    let mut r = rng(seed);
    for i in (1..items.len()).rev() {
        let j = r.random_range(0..=i);
        items.swap(i, j);
    }
}

/// `k` distinct indices out of `0..n`, uniformly, in draw order
/// (partial Fisher-Yates).
pub fn sample_indices(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let k = k.min(n);
    let mut idx: Vec<usize> = (0..n).collect();
    let mut r = rng(seed);
    for i in 0..k {
        let j = r.random_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx
}
