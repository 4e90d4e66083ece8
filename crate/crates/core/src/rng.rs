//! Seed derivation. Every random stream in the pipeline is a ChaCha8 stream
//! keyed by a root seed and a path of integer tags, so results never depend
//! on thread scheduling or on how many draws another stream made.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `tags` into `seed`.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(seed), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn stream(seed: u64, tags: &[u64]) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tags))
}

/// Stream tags, one per consumer.
pub mod tag {
    pub const ENCODER_INIT: u64 = 1;
    pub const HEAD_INIT: u64 = 2;
    pub const CLASSIFIER_INIT: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const DROPOUT: u64 = 5;
    pub const AUGMENT: u64 = 6;
    pub const FEW_SHOT: u64 = 7;
    pub const VAL_SPLIT: u64 = 8;
    pub const SYNTHETIC: u64 = 9;
}
