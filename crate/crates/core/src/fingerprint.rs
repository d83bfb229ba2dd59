//! Stable 64-bit content fingerprints (FNV-1a) used for model ids and
//! artifact manifests. These are equality fingerprints for reproducibility
//! checks, not cryptographic digests.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

pub fn hex64(h: u64) -> String {
    format!("{h:016x}")
}

pub fn fingerprint_str(s: &str) -> String {
    hex64(fnv1a64(s.as_bytes()))
}
