//! Hierarchical seed derivation.
//!
//! Child streams are keyed by a label, so adding a child never shifts the
//! seeds of its siblings.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the child stream `label` under `parent`.
pub fn derive(parent: u64, label: &str) -> u64 {
    // FNV-1a over the label, then mixed with the parent
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(parent ^ splitmix64(h))
}

pub fn derive_index(parent: u64, label: &str, index: usize) -> u64 {
    derive(derive(parent, label), &index.to_string())
}

pub fn stream(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
