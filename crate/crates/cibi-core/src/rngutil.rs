//! Counter-based random streams.
//!
//! Every stochastic step in the crate draws from a stream derived from
//! `(root seed, purpose label, index)`. Streams are independent of each other
//! and of how work is scheduled, so generation order, worker count, and
//! whether a branch is enabled at all never perturb unrelated draws.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// 64-bit FNV-1a over a byte string. Also used to fingerprint configs and
/// vocabularies.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// splitmix64 finalizer; good avalanche for combining counters.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Derive the key for stream `(seed, domain, index)`.
pub fn derive_key(seed: u64, domain: &str, index: u64) -> u64 {
    let d = fnv1a64(domain.as_bytes());
    splitmix64(splitmix64(seed ^ d).wrapping_add(splitmix64(index ^ d.rotate_left(17))))
}

/// A fresh generator for stream `(seed, domain, index)`.
pub fn stream(seed: u64, domain: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_key(seed, domain, index))
}

/// Standard normal draw via Box-Muller; two uniforms per call, no state.
pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    use rand::Rng;
    // Avoid ln(0) by nudging the first uniform away from zero.
    let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
