//! Hashing and seed derivation helpers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Hex SHA-256 over length-prefixed parts, so `["ab", "c"]` and
/// `["a", "bc"]` hash differently.
pub fn sha256_hex(parts: &[&[u8]]) -> String {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part);
    }
    hex::encode(hasher.finalize())
}

pub fn sha256_str(parts: &[&str]) -> String {
    let bytes: Vec<&[u8]> = parts.iter().map(|s| s.as_bytes()).collect();
    sha256_hex(&bytes)
}

/// Derives an independent 64-bit seed from a base seed and a label path.
/// Streams keyed this way do not depend on the order in which they are
/// requested, which keeps fault streams identical across controllers.
pub fn derive_seed(base: u64, labels: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    for label in labels {
        hasher.update((label.len() as u64).to_le_bytes());
        hasher.update(label.as_bytes());
    }
    let out = hasher.finalize();
    let mut buf = [0u8; 8];
    buf.copy_from_slice(&out[..8]);
    u64::from_le_bytes(buf)
}

pub fn derived_rng(base: u64, labels: &[&str]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, labels))
}

/// Maps the first bytes of a hex digest to `[0, 1)`, offset by `salt`.
pub fn unit_from_digest(digest: &str, salt: usize) -> f64 {
    let start = (salt * 4) % digest.len().saturating_sub(8).max(1);
    let chunk = &digest[start..start + 8];
    u32::from_str_radix(chunk, 16).unwrap_or_default() as f64 / (u32::MAX as f64 + 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn length_prefixing_separates_parts() {
        assert_ne!(sha256_str(&["ab", "c"]), sha256_str(&["a", "bc"]));
        assert_eq!(sha256_str(&["x"]).len(), 64);
    }

    #[test]
    fn derived_seeds_are_stable_and_distinct() {
        assert_eq!(derive_seed(1, &["a", "b"]), derive_seed(1, &["a", "b"]));
        assert_ne!(derive_seed(1, &["a", "b"]), derive_seed(2, &["a", "b"]));
        assert_ne!(derive_seed(1, &["ab"]), derive_seed(1, &["a", "b"]));
    }

    #[test]
    fn unit_values_in_range() {
        let d = sha256_str(&["q"]);
        for salt in 0..20 {
            let u = unit_from_digest(&d, salt);
            assert!((0.0..1.0).contains(&u));
        }
    }
}
