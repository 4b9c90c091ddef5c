//! Keyed random streams.
//!
//! Every stochastic draw in the crate comes from a ChaCha stream seeded by
//! hashing `(seed, purpose, indices...)`, so results do not depend on call
//! order or on which optional code paths ran before.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// SplitMix64 finaliser.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, purpose: &str, keys: &[u64]) -> u64 {
    let mut h = mix64(seed);
    for b in purpose.bytes() {
        h = mix64(h ^ b as u64);
    }
    for &k in keys {
        h = mix64(h ^ k);
    }
    h
}

pub fn stream(seed: u64, purpose: &str, keys: &[u64]) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(seed, purpose, keys))
}
