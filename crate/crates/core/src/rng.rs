//! Counter-based seed derivation.
//!
//! Every generator in the crate is a `ChaCha8Rng` seeded from a `u64` that is
//! derived from the master seed and a path of labels/counters. A child seed
//! depends only on its parent and its label, never on generation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from `parent` and a numeric label.
pub fn derive(parent: u64, label: u64) -> u64 {
    mix(mix(parent) ^ label.rotate_left(17))
}

/// Derive a child seed from `parent` and a string tag.
pub fn derive_tag(parent: u64, tag: &str) -> u64 {
    // FNV-1a over the tag bytes
    let h = tag.bytes().fold(0xcbf2_9ce4_8422_2325_u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    });
    derive(parent, h)
}

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
