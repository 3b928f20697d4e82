//! Seed derivation.
//!
//! Every random choice in a run is drawn from a ChaCha stream whose seed is a
//! pure function of the run seed and a short path of tags, so results do not
//! depend on evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a, stable across platforms and releases.
pub fn hash_str(s: &str) -> u64 {
    s.bytes()
        .fold(FNV_OFFSET, |h, b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix a base seed with an ordered list of tags into a new seed.
pub fn derive(seed: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix(seed), |acc, &t| splitmix(acc ^ splitmix(t)))
}

pub fn rng_from(seed: u64, tags: &[u64]) -> Rng {
    Rng::seed_from_u64(derive(seed, tags))
}

/// Stream tags, kept distinct so sub-streams never collide.
pub mod tag {
    pub const SYNTHETIC: u64 = 1;
    pub const SCHEDULE: u64 = 2;
    pub const SPLIT: u64 = 3;
    pub const INIT_BACKBONE: u64 = 4;
    pub const INIT_HEAD: u64 = 5;
    pub const SHUFFLE: u64 = 6;
    pub const MIXUP: u64 = 7;
    pub const PERTURB: u64 = 8;
    pub const EMBED_NOISE: u64 = 9;
    pub const MEMORY: u64 = 10;
    pub const TASK: u64 = 11;
}
