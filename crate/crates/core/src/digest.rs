//! Short content hashes used to name parameter files and to fingerprint
//! configurations in error messages.

use sha2::{Digest, Sha256};

/// First 16 hex digits of the SHA-256 of `bytes`.
pub fn short_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .take(8)
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_value() {
        // SHA-256("abc") starts with ba7816bf8f01cfea.
        assert_eq!(short_hash(b"abc"), "ba7816bf8f01cfea");
    }
}
