//! Deterministic RNG plumbing. Every random source in the pipeline derives
//! from one global seed plus a stream label, so runs with equal config+seed
//! replay bit-identically.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// FNV-1a over the label bytes; stable across platforms and versions.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// A named substream of the global seed. `index` distinguishes repeated uses
/// of the same label (per step, per image, per epoch).
pub fn stream(seed: u64, label: &str, index: u64) -> ChaCha12Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&fnv1a(label.as_bytes()).to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    key[24..32].copy_from_slice(&(seed ^ 0x9e3779b97f4a7c15).to_le_bytes());
    ChaCha12Rng::from_seed(key)
}
