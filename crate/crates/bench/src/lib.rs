//! Shared fixtures for the benchmarks.

use halunet::{generate, Dataset, SynthConfig};

pub const D_EMB: usize = 32;

pub fn fixture(n: usize, seed: u64) -> Dataset {
    generate(&SynthConfig {
        n_records: n,
        d_emb: D_EMB,
        seed,
        ..SynthConfig::default()
    })
    .expect("synthetic fixture")
}

/// Deterministic scores and labels for metric benchmarks.
pub fn scored(n: usize) -> (Vec<f64>, Vec<u8>) {
    let mut rng = halunet::Rng::new(n as u64);
    let labels: Vec<u8> = (0..n).map(|_| u8::from(rng.bernoulli(0.5))).collect();
    let scores = labels.iter().map(|&y| 0.3 * f64::from(y) + rng.uniform()).collect();
    (scores, labels)
}
