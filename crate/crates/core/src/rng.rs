//! Seeded random streams. Every stochastic component takes its own
//! [`ChaCha8Rng`] derived from a run seed and a fixed stream name.

use rand::SeedableRng;
pub use rand_chacha::ChaCha8Rng;

/// 64-bit FNV-1a hash.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Independent stream for `(seed, name)`.
pub fn stream(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a64(name.as_bytes()).rotate_left(17))
}
