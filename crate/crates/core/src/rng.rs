// SPDX-License-Identifier: MIT OR Apache-2.0

//! Seeded randomness.
//!
//! Every random draw in the crate comes from [`Rng`]: xoshiro256++ whose
//! 256-bit state is filled from a 64-bit seed by SplitMix64. Uniform `f64`s
//! take the top 53 bits of one output. The algorithm is fixed so that runs
//! reproduce across machines and releases.

use rand::{RngCore, SeedableRng};
use rand_xoshiro::{SplitMix64, Xoshiro256PlusPlus};

/// The crate's deterministic generator.
pub type Rng = Xoshiro256PlusPlus;

/// Generator seeded from a single `u64`.
pub fn seeded(seed: u64) -> Rng {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

/// Independent sub-seed number `stream` of `seed`.
///
/// Stream `k` depends only on `(seed, k)`, so adding prompts never changes
/// the seeds of existing ones.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;
    SplitMix64::seed_from_u64(seed.wrapping_add(stream.wrapping_add(1).wrapping_mul(GAMMA)))
        .next_u64()
}

/// Uniform draw in `[0, 1)` with 53 bits of precision.
pub fn uniform(rng: &mut Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
