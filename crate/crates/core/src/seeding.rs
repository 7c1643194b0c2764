//! Deterministic RNG derivation.
//!
//! Every stochastic site in the crate draws from a stream derived from the
//! run seed plus a domain label and indices, so single-worker runs replay
//! bit-identically regardless of scheduling.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive an independent RNG from a master seed, a domain label, and two
/// indices (use 0 when an index is not meaningful).
pub fn derive_rng(master: u64, domain: &str, a: u64, b: u64) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update([0x1f]);
    hasher.update(domain.as_bytes());
    hasher.update([0x1f]);
    hasher.update(a.to_le_bytes());
    hasher.update(b.to_le_bytes());
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}
