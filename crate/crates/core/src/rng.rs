//! Seeded random streams. Every stochastic step derives its own stream from
//! the run seed and a purpose tag, so results do not depend on call order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream for `(seed, tag, index)`; `index` is typically an epoch number.
pub fn stream(seed: u64, tag: u64, index: u64) -> Rng {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    ChaCha8Rng::seed_from_u64(z)
}

pub mod tags {
    pub const INIT: u64 = 1;
    pub const PRETRAIN_SHUFFLE: u64 = 2;
    pub const NEGATIVES: u64 = 3;
    pub const TRAIN_SHUFFLE: u64 = 4;
    pub const KMEANS: u64 = 5;
    pub const FOURIER: u64 = 6;
    pub const SYNTHETIC: u64 = 7;
}
