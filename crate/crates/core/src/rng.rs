//! Seed derivation. Every random draw in a run descends from one seed via
//! named streams, so changing how one stream is consumed never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Data = 1,
    Augment = 2,
    Init = 3,
    Shuffle = 4,
    DomainTransform = 5,
    Pool = 6,
}

/// SplitMix64 finalizer.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds `parts` into a 64-bit seed.
pub fn derive(seed: u64, stream: Stream, parts: &[u64]) -> u64 {
    let mut h = mix(seed ^ mix(stream as u64));
    for &p in parts {
        h = mix(h ^ p);
    }
    h
}

pub fn stream_rng(seed: u64, stream: Stream, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, stream, parts))
}
