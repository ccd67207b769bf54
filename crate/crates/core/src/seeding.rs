//! Seed derivation for independent deterministic RNG streams.
//!
//! Every stochastic stage (signatures, per-view noise, captions, shuffles,
//! parameter init) draws from its own ChaCha8 stream keyed by a base seed
//! plus a purpose label, so adding draws to one stage never perturbs another.

use sha2::{Digest, Sha256};

/// Derives a 64-bit stream seed from a base seed and a purpose label.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 yields >= 8 bytes"))
}
