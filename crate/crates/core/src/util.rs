//! Small shared helpers: content hashing and score ordering.

use std::cmp::Ordering;

/// FNV-1a over a byte stream. Used for artifact staleness checks and
/// vocabulary fingerprints; not a cryptographic hash.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Hex rendering of [`fnv1a`], as stored in manifests and checkpoints.
pub fn fnv1a_hex(bytes: &[u8]) -> String {
    format!("{:016x}", fnv1a(bytes))
}

/// Fingerprint of a slice of `f64` parameters, by little-endian bytes.
/// Bit-identical parameters hash equal; any bit flip hashes different.
pub fn hash_f64s(values: &[f64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for b in v.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// Ranking order shared by every retriever: score descending, id ascending.
/// Total over floats (NaN sorts last, but scores are never NaN in practice).
pub fn rank_order<I: Ord>(a_score: f64, a_id: &I, b_score: f64, b_id: &I) -> Ordering {
    b_score
        .total_cmp(&a_score)
        .then_with(|| a_id.cmp(b_id))
}
