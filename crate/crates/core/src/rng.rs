//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! keyed by a base seed and a stream index, so results do not depend on the
//! order or thread in which work runs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finaliser.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, stream: u64) -> u64 {
    mix(mix(base) ^ stream.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

pub fn stream_rng(base: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, stream))
}
