//! Labeled seed derivation.
//!
//! `seed_split(root, label)` is the first eight bytes (little-endian) of
//! SHA-256 over the root seed's little-endian bytes followed by the UTF-8
//! label. The construction is frozen: changing it changes every run.

use sha2::{Digest, Sha256};

pub fn seed_split(root: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}
