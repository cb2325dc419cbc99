//! Deterministic seed derivation. Every random draw in the crate comes from a
//! `ChaCha8Rng` whose seed is derived from the run seed plus a path of stream
//! tags, so results do not depend on call order across components.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes `tags` into `base`, one after another.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(base), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn rng_for(base: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tags))
}

/// Stable 64-bit hash of a string (FNV-1a), used to turn instance ids into tags.
pub fn hash_str(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

pub mod stream {
    pub const SLOT_INIT: u64 = 1;
    pub const SLOT_SELECT: u64 = 2;
    pub const VIEW: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const PARAMS: u64 = 5;
    pub const EVAL: u64 = 6;
    pub const KMEANS: u64 = 7;
    pub const DATASET: u64 = 8;
    pub const PALETTE: u64 = 9;
    pub const SPLIT: u64 = 10;
    pub const NOISE: u64 = 11;
    pub const STEP: u64 = 12;
}
