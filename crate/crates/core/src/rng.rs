//! Deterministic randomness. Every stochastic component draws from a
//! stream-keyed ChaCha8 generator so runs are reproducible bit-for-bit for a
//! given seed, independent of call interleaving elsewhere.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::element::Element;
use crate::tensor::Tensor;

/// Named sub-streams keep independent consumers decoupled: adding draws to
/// one stream never shifts another.
pub fn stream(seed: u64, label: &str) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in label.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    key[8..16].copy_from_slice(&h.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Standard normal via Box-Muller; two uniforms per pair of outputs keeps
/// the draw count predictable.
pub fn next_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub fn randn<E: Element>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<E> {
    Tensor::from_fn(shape, |_| E::from_f64(next_normal(rng) * std))
}

pub fn uniform<E: Element>(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<E> {
    Tensor::from_fn(shape, |_| E::from_f64(rng.gen_range(lo..hi)))
}
