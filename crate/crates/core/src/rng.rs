//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! keyed by a master seed and a path of stream tags, so independent streams
//! (per episode, per iteration) never depend on evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix(master), |acc, &t| splitmix(acc ^ splitmix(t)))
}

pub fn rng_from(master: u64, tags: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(master, tags))
}

/// Stream tags. Arbitrary but fixed.
pub mod stream {
    pub const RESET: u64 = 1;
    pub const POLICY: u64 = 2;
    pub const EPISODE: u64 = 3;
    pub const CHANNEL_INIT: u64 = 4;
    pub const CHANNEL_SHUFFLE: u64 = 5;
    pub const PPO: u64 = 6;
    pub const EVAL: u64 = 7;
    pub const ITERATION: u64 = 8;
    pub const POLICY_INIT: u64 = 9;
}
