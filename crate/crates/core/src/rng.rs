//! Seeded random streams.
//!
//! Every consumer of randomness gets its own ChaCha stream derived from the
//! experiment seed and a fixed label, so adding draws in one place never
//! shifts the numbers seen somewhere else.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type Stream = ChaCha8Rng;

/// FNV-1a over the label bytes, used as the ChaCha stream id.
fn label_id(label: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Independent stream for `(seed, label)`.
pub fn stream(seed: u64, label: &str) -> Stream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(label_id(label));
    rng
}

/// Independent stream for `(seed, label, index)`, e.g. one per session.
pub fn indexed_stream(seed: u64, label: &str, index: usize) -> Stream {
    stream(seed, &format!("{label}/{index}"))
}

pub fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn normal_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}
