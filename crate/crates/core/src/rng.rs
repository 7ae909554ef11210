//! Seeded random streams.
//!
//! Every random decision in the crate draws from a ChaCha8 stream whose
//! 64-bit seed is derived from a base seed plus a tuple of integer
//! coordinates (epoch, image id, outer level, inner level, ...). The
//! derivation folds each coordinate into the state with the SplitMix64
//! finalizer:
//!
//! ```text
//! h = mix(seed ^ 0x6a09e667f3bcc909)
//! for each coordinate c: h = mix(h ^ mix(c + 0x9e3779b97f4a7c15))
//! mix(z) = z ^= z >> 30; z *= 0xbf58476d1ce4e5b9;
//!          z ^= z >> 27; z *= 0x94d049bb133111eb; z ^ (z >> 31)
//! ```
//!
//! Streams therefore depend only on their coordinates, never on call order,
//! which keeps batch evaluation reproducible under any worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Domain tags so unrelated consumers never share a stream.
pub mod tag {
    pub const NEGATIVES: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const CLASS_INIT: u64 = 3;
    pub const PROTOTYPES: u64 = 4;
    pub const IMAGES: u64 = 5;
    pub const SPLIT: u64 = 6;
    pub const FEWSHOT: u64 = 7;
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, coords: &[u64]) -> u64 {
    let mut h = mix(seed ^ 0x6a09_e667_f3bc_c909);
    for &c in coords {
        h = mix(h ^ mix(c.wrapping_add(0x9e37_79b9_7f4a_7c15)));
    }
    h
}

pub fn stream(seed: u64, coords: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, coords))
}
