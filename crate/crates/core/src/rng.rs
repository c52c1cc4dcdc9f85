//! Deterministic RNG stream derivation.
//!
//! Every random draw in the crate comes from a ChaCha stream seeded by mixing
//! a tuple of identifiers (global seed, task, rollout, purpose tag), so
//! parallel or re-ordered collection reproduces bit-identical results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream purpose tags.
pub mod tag {
    pub const WORLD: u64 = 0x57;
    pub const TASKS: u64 = 0x54;
    pub const POLICY: u64 = 0x50;
    pub const FAULT: u64 = 0x46;
    pub const INIT: u64 = 0x49;
    pub const Q_TRAIN: u64 = 0x51;
    pub const SWPO: u64 = 0x53;
    pub const EVAL: u64 = 0x45;
    pub const SFT: u64 = 0x4654;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn mix(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x2545_F491_4F6C_DD1D, |acc, &p| splitmix(acc ^ splitmix(p)))
}

/// Stable 64-bit hash of a string (FNV-1a), used to fold task ids into seeds.
pub fn hash_str(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

pub fn stream(parts: &[u64]) -> Rng {
    Rng::seed_from_u64(mix(parts))
}
