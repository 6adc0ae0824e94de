//! Seed derivation for independent, reproducible random streams.
//!
//! Every random draw in a scenario comes from a ChaCha stream keyed by
//! `(master seed, trial index, purpose tag, ...)`. Adding a new purpose never
//! shifts the draws of an existing one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn tag_hash(tag: &str) -> u64 {
    // FNV-1a
    tag.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Mixes a master seed with a purpose tag and any number of integer keys.
pub fn derive(master: u64, tag: &str, keys: &[u64]) -> u64 {
    let mut h = splitmix(master ^ splitmix(tag_hash(tag)));
    for &k in keys {
        h = splitmix(h ^ splitmix(k.wrapping_add(GOLDEN)));
    }
    h
}

pub fn rng_from(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stream(master: u64, tag: &str, keys: &[u64]) -> Rng {
    rng_from(derive(master, tag, keys))
}
