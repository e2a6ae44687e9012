//! Deterministic random-number plumbing.
//!
//! Every random draw in the crate flows through a ChaCha stream seeded from a
//! run seed mixed with structural coordinates (task id, sample index, purpose
//! tag), so parallel and serial generation agree bitwise.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer; decorrelates structured seed inputs.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix a base seed with structural parts into a single derived seed.
pub fn mix(base: u64, parts: &[u64]) -> u64 {
    let mut acc = splitmix64(base);
    for &p in parts {
        acc = splitmix64(acc ^ splitmix64(p));
    }
    acc
}

/// Stable 64-bit hash of a string label, for use as a `mix` part.
pub fn label_part(label: &str) -> u64 {
    // FNV-1a, then finalized; keeps task-id streams disjoint.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    splitmix64(h)
}

/// Seeded generator for a (base seed, structural parts) coordinate.
pub fn rng_for(base: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(base, parts))
}

/// Standard-normal draw via Box-Muller; deterministic under the given rng.
pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    // Guard against ln(0).
    let u1: f64 = loop {
        let u: f64 = rng.gen();
        if u > 1e-300 {
            break u;
        }
    };
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Fill a slice with N(0, std^2) draws.
pub fn fill_normal(rng: &mut ChaCha8Rng, std: f64, out: &mut [f64]) {
    for v in out.iter_mut() {
        *v = normal(rng) * std;
    }
}

/// Fisher-Yates shuffle of indices 0..n, deterministic under the rng.
pub fn shuffled_indices(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}
