//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! keyed by a seed derived from the master seed and a fixed tuple of
//! indices, so results never depend on scheduling or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a path of indices into a new seed.
pub fn derive(base: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derived_rng(base: u64, path: &[u64]) -> Rng {
    rng(derive(base, path))
}

// Stream tags, so that independent consumers of one master seed never
// collide.
pub const STREAM_TRAIN_INSTANCES: u64 = 1;
pub const STREAM_EPISODE: u64 = 2;
pub const STREAM_TRAINING: u64 = 3;
pub const STREAM_INIT: u64 = 4;
pub const STREAM_VALIDATION: u64 = 5;
