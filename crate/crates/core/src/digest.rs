//! SHA-256 helpers used for content addressing and provenance stamps.

use sha2::{Digest as _, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Incremental hasher that length-prefixes every field, so that field
/// boundaries cannot be shifted between inputs.
#[derive(Default)]
pub struct FieldHasher(Sha256);

impl FieldHasher {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn field(&mut self, bytes: &[u8]) -> &mut Self {
        self.0.update((bytes.len() as u64).to_le_bytes());
        self.0.update(bytes);
        self
    }

    pub fn finish(self) -> String {
        hex::encode(self.0.finalize())
    }
}

/// Stable 64-bit seed for `(seed, key)`; used to give every record its own RNG stream.
pub fn derive_seed(seed: u64, key: &str) -> u64 {
    let mut h = FieldHasher::new();
    h.field(&seed.to_le_bytes()).field(key.as_bytes());
    let out = Sha256::digest(h.finish().as_bytes());
    u64::from_le_bytes(out[..8].try_into().expect("8 bytes"))
}
