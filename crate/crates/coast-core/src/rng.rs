//! Seed derivation and sampling helpers. Every random stream in the crate is
//! a ChaCha8 generator derived from a master seed and a purpose tag, so runs
//! are reproducible byte-for-byte from the config seed alone.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; decorrelates seed/tag combinations.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Deterministic stream for (`seed`, `tag`).
pub fn stream(seed: u64, tag: &str) -> ChaCha8Rng {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in tag.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    ChaCha8Rng::seed_from_u64(mix(seed ^ h))
}

/// Deterministic stream for (`seed`, `tag`, `index`).
pub fn stream_indexed(seed: u64, tag: &str, index: u64) -> ChaCha8Rng {
    let mut rng = stream(seed, tag);
    let offset: u64 = rng.gen();
    ChaCha8Rng::seed_from_u64(mix(offset ^ mix(index)))
}

/// Standard normal sample via Box-Muller.
pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
