use sha2::{Digest, Sha256};

/// First eight bytes of SHA-256, little-endian. Stable across platforms and
/// releases, unlike `std::hash`.
pub fn stable_hash64(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Derives an independent seed for a named sub-stream.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    let mut buf = base.to_le_bytes().to_vec();
    buf.extend_from_slice(label.as_bytes());
    stable_hash64(&buf)
}
