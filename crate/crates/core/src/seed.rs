//! Seed splitting for independent, reproducible random streams.
//!
//! Every stream seed is `derive(master, &[tag, index, ...])`: the parts are
//! folded into the master seed one by one through the SplitMix64 finalizer.
//! Streams therefore depend only on their coordinates, never on the order in
//! which threads reach them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(master: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix64(master), |acc, &p| {
        splitmix64(acc ^ splitmix64(p))
    })
}

pub fn stream(master: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(master, parts))
}

// Stream tags.
pub const SCENE: u64 = 1;
pub const ROLLOUT: u64 = 2;
pub const SHUFFLE: u64 = 3;
pub const EVAL: u64 = 4;
pub const COMPARE: u64 = 5;
