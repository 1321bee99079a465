//! Deterministic random-stream derivation.
//!
//! Every consumer of randomness gets its own stream derived from the root
//! seed, a purpose label, and integer coordinates (epoch, sample index, ...).
//! Streams never share state, so reordering or parallelizing consumers cannot
//! change what any one of them draws. This is what makes per-sample
//! augmentation replay and bit-exact training resume possible.

use rand_chacha::ChaCha8Rng;
use rand::{Rng, SeedableRng};
use sha2::{Digest, Sha256};

/// Derives an independent generator for `(seed, label, coords)`.
///
/// The key is a SHA-256 over the length-prefixed label and the raw
/// little-endian words, so distinct inputs yield unrelated streams on every
/// platform.
pub fn stream(seed: u64, label: &str, coords: &[u64]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((label.len() as u64).to_le_bytes());
    h.update(label.as_bytes());
    for &c in coords {
        h.update(c.to_le_bytes());
    }
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Uniform draw in `[lo, hi)`.
pub fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Uniform draw in log space; requires `0 < lo <= hi`.
pub fn log_uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    uniform(rng, lo.ln(), hi.ln()).exp()
}

/// Bernoulli trial consuming exactly one `f64` from the stream.
pub fn coin(rng: &mut impl Rng, p: f64) -> bool {
    rng.random::<f64>() < p
}

/// Standard normal via Box-Muller, consuming exactly two draws.
pub fn normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Fisher-Yates permutation of `0..n`.
pub fn permutation(rng: &mut impl Rng, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}
