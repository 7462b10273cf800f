//! Deterministic RNG stream derivation.
//!
//! Every source of randomness in the simulator draws from a ChaCha stream
//! keyed by `(master_seed, domain, salt)`. Streams are independent of each
//! other and of evaluation order, so runs are reproducible regardless of how
//! much parallelism is used.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

/// Derive an independent ChaCha RNG for `(master, domain, salt)`.
pub fn derive_rng(master: u64, domain: &str, salt: u64) -> ChaCha20Rng {
    ChaCha20Rng::from_seed(derive_key(master, domain, salt))
}

/// Derive a child seed, for nesting stream families.
pub fn derive_seed(master: u64, domain: &str, salt: u64) -> u64 {
    let key = derive_key(master, domain, salt);
    u64::from_le_bytes(key[..8].try_into().expect("8-byte slice"))
}

fn derive_key(master: u64, domain: &str, salt: u64) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update([0x1f]);
    hasher.update(domain.as_bytes());
    hasher.update([0x1f]);
    hasher.update(salt.to_le_bytes());
    hasher.finalize().into()
}
