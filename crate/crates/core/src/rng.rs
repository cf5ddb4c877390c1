//! Seeded, counter-derived random streams.
//!
//! Every stochastic choice (shuffles, augmentation, drop path, sub-network
//! sampling, evolutionary operators) draws from a stream keyed by the run
//! seed plus a position such as `(epoch, index)` or `(step)`. Resuming at a
//! position therefore reproduces the exact draws of an uninterrupted run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stream for `seed` at position `keys`.
pub fn stream(seed: u64, keys: &[u64]) -> StreamRng {
    let mut h = splitmix64(seed);
    for &k in keys {
        h = splitmix64(h ^ splitmix64(k.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    ChaCha8Rng::seed_from_u64(h)
}

/// Domain tags keeping streams for different purposes apart.
pub mod tag {
    pub const SHUFFLE: u64 = 1;
    pub const AUGMENT: u64 = 2;
    pub const DROP_PATH: u64 = 3;
    pub const ARCH_SAMPLE: u64 = 4;
    pub const INIT: u64 = 5;
    pub const SEARCH: u64 = 6;
    pub const SPLIT: u64 = 7;
    pub const SYNTHETIC: u64 = 8;
}
