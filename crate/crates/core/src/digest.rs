use sha2::{Digest, Sha256};

pub fn f64_le_bytes(values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn f64_from_le_bytes(bytes: &[u8]) -> Option<Vec<f64>> {
    if !bytes.len().is_multiple_of(8) {
        return None;
    }
    Some(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8"))).collect())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_f64s(values: &[f64]) -> String {
    sha256_hex(&f64_le_bytes(values))
}

/// Short 64-bit fingerprint of a noise draw and its timestep, logged once per
/// iteration so paired runs can be checked for identical `(t, eps)` streams.
pub fn draw_fingerprint(t: usize, eps: &[f64]) -> String {
    let mut h = Sha256::new();
    h.update((t as u64).to_le_bytes());
    for v in eps {
        h.update(v.to_le_bytes());
    }
    hex::encode(&h.finalize()[..8])
}
