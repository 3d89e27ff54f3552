//! Stable hashing helpers used to derive RNG seeds from string keys.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// 64-bit digest of `(seed, domain, key)`; identical on every platform.
pub fn key_hash(seed: u64, domain: &str, key: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((domain.len() as u64).to_le_bytes());
    h.update(domain.as_bytes());
    h.update(key.as_bytes());
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("digest has 32 bytes"))
}

/// Counter-based generator seeded from a key hash.
pub fn keyed_rng(seed: u64, domain: &str, key: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(key_hash(seed, domain, key))
}

pub fn hex_digest(bytes: &[u8]) -> String {
    let out = Sha256::digest(bytes);
    out.iter().map(|b| format!("{b:02x}")).collect()
}
