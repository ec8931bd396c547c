//! Seed derivation. Every random choice in the crate comes from a
//! ChaCha stream whose seed is a hash of a base seed and a label, so
//! results never depend on scheduling or call order across tables.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Stable 64-bit hash of a sequence of byte strings.
pub fn stable_hash(parts: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

pub fn derive_seed(base: u64, label: &str, index: u64) -> u64 {
    stable_hash(&[&base.to_le_bytes(), label.as_bytes(), &index.to_le_bytes()])
}

/// Independent stream for `(base, label, index)`.
pub fn substream(base: u64, label: &str, index: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(base, label, index))
}

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
