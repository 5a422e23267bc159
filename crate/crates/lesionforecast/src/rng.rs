//! Seed derivation for reproducible, independently-streamed RNGs.
//!
//! Every stochastic stage draws from a ChaCha stream keyed by the global
//! seed, a purpose label, and an index. Streams are independent of each
//! other and of thread scheduling, so artifacts are byte-identical for a
//! fixed seed regardless of parallelism.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Derives a child seed from (seed, label, index) with an FNV-style mix.
pub fn derive_seed(seed: u64, label: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325 ^ seed.rotate_left(17);
    for b in label.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h ^= index.wrapping_mul(0x9e3779b97f4a7c15);
    h = h.wrapping_mul(0x100000001b3);
    h ^ (h >> 31)
}

pub fn stream(seed: u64, label: &str, index: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, label, index))
}
