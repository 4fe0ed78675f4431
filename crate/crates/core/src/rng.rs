//! Deterministic RNG stream derivation.
//!
//! Every random decision in the crate flows from one master seed through
//! named, indexed streams, so records can be processed in parallel (or in
//! any order) and still reproduce bit-identically.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer; decorrelates nearby seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from `master`, a domain tag and stream indices.
pub fn derive_seed(master: u64, tag: &str, parts: &[u64]) -> u64 {
    let mut h = mix(master);
    for b in tag.as_bytes() {
        h = mix(h ^ u64::from(*b));
    }
    for &p in parts {
        h = mix(h ^ p);
    }
    h
}

/// A ChaCha stream for (`master`, `tag`, `parts`).
pub fn stream(master: u64, tag: &str, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, tag, parts))
}

/// Standard normal draw (Box–Muller).
pub fn randn(rng: &mut ChaCha8Rng) -> f64 {
    use rand::Rng;
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
