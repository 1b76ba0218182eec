//! Deterministic random-stream derivation.
//!
//! Every stochastic draw in a run comes from a ChaCha stream whose key is a
//! mix of the run seed and a small tuple of labels (particle id, step, purpose).
//! Results therefore do not depend on how particles are scheduled over threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type StreamRng = ChaCha8Rng;

/// Stream purposes, mixed into the derivation key.
#[derive(Debug, Clone, Copy)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Step = 2,
    Resample = 3,
    Measurement = 4,
    Truth = 5,
    Baseline = 6,
    Codec = 7,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Mixes a seed with any number of labels into a single 64-bit key.
pub fn mix(seed: u64, labels: &[u64]) -> u64 {
    labels
        .iter()
        .fold(splitmix64(seed), |acc, &l| splitmix64(acc ^ splitmix64(l)))
}

pub fn stream(seed: u64, purpose: Purpose, labels: &[u64]) -> StreamRng {
    let mut key = vec![purpose as u64];
    key.extend_from_slice(labels);
    ChaCha8Rng::seed_from_u64(mix(seed, &key))
}

pub fn standard_normal_vec<R: rand::Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}
