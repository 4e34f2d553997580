//! Deterministic seed derivation.
//!
//! All randomness in a run is derived from four base seeds (topology, data,
//! training, channel) through pure hash mixing. A consumer asks for a stream
//! by `(base, label, tags...)`, so the draw order of one component never
//! shifts another component's stream — this is what makes runs reproducible
//! across thread counts and lets two engines consume identical streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; good avalanche for seed mixing.
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Derive a subseed from a base seed, a stream label, and integer tags.
pub fn subseed(base: u64, label: &str, tags: &[u64]) -> u64 {
    let mut s = splitmix(base ^ fnv1a(label.as_bytes()));
    for &t in tags {
        s = splitmix(s ^ splitmix(t));
    }
    s
}

/// Seeded ChaCha stream for the given `(base, label, tags)`.
pub fn stream(base: u64, label: &str, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(subseed(base, label, tags))
}

/// Per-experiment seed derivation for sweeps: XOR with a hashed index.
pub fn experiment_seed(base: u64, index: u64) -> u64 {
    base ^ splitmix(index.wrapping_add(1))
}

/// Standard normal via Box-Muller on two uniform draws.
pub fn next_gaussian(rng: &mut impl rand::Rng) -> f64 {
    loop {
        let u1: f64 = rng.gen::<f64>();
        let u2: f64 = rng.gen::<f64>();
        if u1 > f64::MIN_POSITIVE {
            return (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        }
    }
}
