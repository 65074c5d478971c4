//! Deterministic seed streams.
//!
//! Every random draw in the pipeline comes from a generator seeded with
//! `derive(global_seed, &[tags...])`, so results do not depend on which
//! worker handles a sample or in what order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `tags` into `seed`; distinct tag paths give independent streams.
pub fn derive(seed: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix(seed), |acc, &t| splitmix(acc ^ splitmix(t)))
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rng_for(seed: u64, tags: &[u64]) -> Rng {
    rng(derive(seed, tags))
}

/// Stream tags used across the crate.
pub mod tag {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const FRAMES: u64 = 3;
    pub const VIDEO_MASK: u64 = 4;
    pub const TEXT_MASK: u64 = 5;
    pub const DATASET: u64 = 6;
    pub const PROBE: u64 = 7;
}
