//! Deterministic seed derivation.
//!
//! Every stochastic draw in the crate is keyed by a chain of integer tags
//! (global seed, sequence id, epoch, step) so that re-running with the same
//! configuration reproduces the exact same stream regardless of thread count
//! or evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; good avalanche, cheap.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a over bytes, used to give string ids a stable numeric identity.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

/// Derive a child seed from a parent seed and a tag.
pub fn derive(seed: u64, tag: u64) -> u64 {
    splitmix64(seed ^ splitmix64(tag))
}

/// Seed for one sequence, stable in the sequence's user id.
pub fn sequence_seed(seed: u64, user_id: &str) -> u64 {
    derive(seed, fnv1a64(user_id.as_bytes()))
}

/// RNG for a single prediction step of a sequence.
pub fn step_rng(sequence_seed: u64, step: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(sequence_seed, step as u64))
}

/// One standard-normal draw for a given (sequence seed, step) pair.
pub fn step_normal(sequence_seed: u64, step: usize) -> f64 {
    use rand::Rng;
    step_rng(sequence_seed, step).sample::<f64, _>(rand_distr::StandardNormal)
}
