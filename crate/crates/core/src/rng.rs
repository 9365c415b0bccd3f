//! Counter-based random streams.
//!
//! Every random decision is drawn from a ChaCha stream whose key is derived
//! from a root seed and a path of integers (chain, epoch, datum, round,
//! particle slot, ...). Two runs with the same seed therefore make the same
//! draws regardless of how work is scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Path tags keep independent uses of the same indices apart.
pub mod tag {
    pub const CHAIN: u64 = 1;
    pub const EPOCH: u64 = 2;
    pub const DATASET: u64 = 3;
    pub const DATUM: u64 = 4;
    pub const ROUND: u64 = 5;
    pub const RESAMPLE: u64 = 6;
    pub const PICK: u64 = 7;
    pub const RESTART: u64 = 8;
    pub const EVAL: u64 = 9;
    pub const GENERATE: u64 = 10;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child key from `key` and a path.
pub fn derive(key: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix(key), |acc, &p| {
        splitmix(acc ^ splitmix(p.wrapping_add(0x5851_F42D_4C95_7F2D)))
    })
}

/// A fresh stream for `key` and `path`.
pub fn stream(key: u64, path: &[u64]) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive(key, path))
}
