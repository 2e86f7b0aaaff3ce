//! Stable sub-seed derivation.
//!
//! Sub-seeds are derived by hashing the master seed together with string
//! context parts (item id, protocol tag, permutation index, ...). Adding
//! items or models to a run therefore never perturbs the seeds of existing
//! instances, which is what makes interrupted runs resumable.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive a 64-bit sub-seed from a master seed and context parts.
///
/// Uses SHA-256 over a length-prefixed encoding so the mapping is stable
/// across platforms and releases, unlike `std`'s `DefaultHasher`.
pub fn derive_seed(master: u64, parts: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part.as_bytes());
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

/// Deterministic RNG for a derived seed. ChaCha output is identical on
/// every platform, which the regeneration contract relies on.
pub fn rng_for(master: u64, parts: &[&str]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, parts))
}
