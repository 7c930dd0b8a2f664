//! Seed derivation for independent random streams.
//!
//! Every trial, agent and environment draws from its own ChaCha stream whose
//! seed is a SplitMix64 mix of a base seed and a small tuple of indices, so
//! results never depend on scheduling order.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `base` with each value of `path` in turn.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// Stream tags used when splitting a trial seed.
pub mod stream {
    pub const AGENT: u64 = 1;
    pub const ENV: u64 = 2;
    pub const INIT: u64 = 3;
}
