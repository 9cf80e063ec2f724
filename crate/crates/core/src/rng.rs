//! Named, prompt-indexed random streams.
//!
//! Every random draw in the lab comes from a stream keyed by a tuple of
//! integers (run seed, purpose, step, prompt id, ...). Streams are
//! independent of evaluation order, which is what makes parallel rollout
//! collection bit-identical to serial collection.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream purposes. Distinct tags keep otherwise equal key tuples apart.
pub mod purpose {
    pub const SUITE: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const INIT: u64 = 3;
    pub const BATCH: u64 = 4;
    pub const ROLLOUT: u64 = 5;
    pub const BASELINE_SCORING: u64 = 6;
    pub const EVAL_SAMPLED: u64 = 7;
    pub const ORACLE: u64 = 8;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic stream for the given key tuple.
pub fn stream(seed: u64, key: &[u64]) -> StreamRng {
    let mut h = splitmix64(seed);
    for &k in key {
        h = splitmix64(h ^ splitmix64(k.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    ChaCha8Rng::seed_from_u64(h)
}
