//! Deterministic seed derivation.
//!
//! A root seed expands into independent per-cell seeds by hashing a path of
//! integers with the SplitMix64 finalizer. Cell seeds depend only on the
//! root and the path, so serial and parallel schedules draw identical
//! randomness.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream tags used when deriving seeds for the experiment grid.
pub mod stream {
    pub const DATASET: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const TRAIN: u64 = 3;
    pub const INIT: u64 = 4;
    pub const TASK: u64 = 5;
    pub const PROBE: u64 = 6;
}

#[inline]
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive(root: u64, path: &[u64]) -> u64 {
    path.iter().fold(mix(root), |acc, &p| mix(acc ^ mix(p)))
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rng_at(root: u64, path: &[u64]) -> Rng {
    rng(derive(root, path))
}
