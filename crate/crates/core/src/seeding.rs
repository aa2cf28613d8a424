//! Deterministic RNG streams derived from a single run seed.
//!
//! Every stochastic component (fold shuffling, weight init, per-sample
//! augmentation) draws from its own named stream so components can be
//! re-executed independently without perturbing each other.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

/// Derive a 32-byte RNG seed from a base seed and a stream label.
pub fn derive_seed(seed: u64, label: &str) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update([0x1f]);
    hasher.update(label.as_bytes());
    hasher.finalize().into()
}

/// RNG for the named sub-stream of `seed`.
pub fn stream_rng(seed: u64, label: &str) -> ChaCha12Rng {
    ChaCha12Rng::from_seed(derive_seed(seed, label))
}

/// RNG for a named sub-stream further keyed by an index (fold id, epoch, ...).
pub fn indexed_rng(seed: u64, label: &str, index: u64) -> ChaCha12Rng {
    stream_rng(seed, &format!("{label}/{index}"))
}

/// A derived 64-bit seed for components that take a plain seed.
pub fn derived_u64(seed: u64, label: &str) -> u64 {
    let bytes = derive_seed(seed, label);
    u64::from_le_bytes(bytes[..8].try_into().unwrap())
}
