//! Seeded random number generation.
//!
//! Every stochastic routine in the crate takes an explicit `&mut SeededRng`.
//! The generator is xoshiro256** seeded through SplitMix64, so a given `u64`
//! seed yields the same stream on every platform. Sub-phases derive their own
//! seeds with [`derive_seed`] rather than sharing a generator.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256StarStar;

pub type SeededRng = Xoshiro256StarStar;

pub fn seeded(seed: u64) -> SeededRng {
    Xoshiro256StarStar::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from a parent seed and a textual tag.
///
/// The tag is folded with FNV-1a and mixed with the parent through SplitMix64,
/// so `derive_seed(s, "pretrain")` and `derive_seed(s, "phantom/u0003")` are
/// independent streams that stay fixed as long as the tag does.
pub fn derive_seed(parent: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01B3);
    }
    splitmix64(splitmix64(parent) ^ h)
}
