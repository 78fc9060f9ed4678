//! Seed derivation and the platform RNG.
//!
//! Every stochastic stage derives its own stream from a master seed and a
//! textual or numeric tag, so results are independent of execution order
//! and thread count.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Mix bytes into a 64-bit state (splitmix64-style finalizer).
fn mix(mut h: u64, byte: u8) -> u64 {
    h ^= byte as u64;
    h = h.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    h ^= h >> 30;
    h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h ^= h >> 27;
    h
}

/// Stable hash of (seed, tag) used for per-stage sub-seeds.
pub fn derive_seed(master: u64, tag: &str) -> u64 {
    let mut h = 0x51_7c_c1_b7_27_22_0a_95u64 ^ master.rotate_left(17);
    for &b in master.to_le_bytes().iter() {
        h = mix(h, b);
    }
    for &b in tag.as_bytes() {
        h = mix(h, b);
    }
    h ^ h >> 32
}

/// Per-item sub-seed (e.g. one stream per session index).
pub fn derive_seed_indexed(master: u64, tag: &str, index: u64) -> u64 {
    let base = derive_seed(master, tag);
    let mut h = base;
    for &b in index.to_le_bytes().iter() {
        h = mix(h, b);
    }
    h ^ h >> 32
}

pub type Rng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
