//! Deterministic random streams.
//!
//! Every random draw in the crate comes from a PCG-64 generator
//! (`rand_pcg::Pcg64`, the 128-bit-state XSL-RR permuted congruential generator)
//! seeded through [`stream`]. Child seeds are derived from a parent with
//! [`split`], which mixes the parent and a stream index through two rounds of
//! the SplitMix64 finaliser. The derivation only uses wrapping 64-bit integer
//! arithmetic, so every seed is identical across platforms.

use rand::SeedableRng;
use rand_pcg::Pcg64;

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

/// SplitMix64 finaliser.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives the seed of child stream `index` from `parent`.
///
/// `split(p, i) = mix64(p ^ mix64((i + 1) * GOLDEN_GAMMA))`
pub fn split(parent: u64, index: u64) -> u64 {
    mix64(parent ^ mix64(index.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA)))
}

/// PCG-64 generator for a seed.
pub fn stream(seed: u64) -> Pcg64 {
    Pcg64::seed_from_u64(seed)
}
