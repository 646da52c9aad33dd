use sha2::{Digest, Sha256};

/// Hex SHA-256 of a string.
pub fn digest_str(s: &str) -> String {
    digest_bytes(s.as_bytes())
}

pub fn digest_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
