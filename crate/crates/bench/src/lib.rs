//! Shared fixtures for the benchmarks.

use hwbp::engine::{Batch, LossAttachment, ModelGraph};
use hwbp::harness::{preset_model, random_batch};
use hwbp::{KChain, ResidualJacobian, Rng, Vec64};

/// A preset model with a final-only loss and a random batch for it.
pub fn model_and_batch(preset: &str, layers: usize, width: usize, batch: usize) -> (ModelGraph, Batch) {
    let model = preset_model(preset, layers, width, LossAttachment::Final, 0).expect("known preset");
    let batch = random_batch(&model, batch, &mut Rng::new(1));
    (model, batch)
}

/// `n` random diagonal residual Jacobians and `n` random cotangents of length `dim`.
pub fn diagonal_chain(n: usize, dim: usize, seed: u64) -> (Vec<Vec64>, KChain) {
    let mut rng = Rng::new(seed);
    let a = (0..n).map(|_| rng.normal(dim, 1.0)).collect();
    let entries = (0..n)
        .map(|_| {
            let d = (0..dim).map(|_| 0.5 + 0.5 * rng.uniform()).collect();
            ResidualJacobian::diagonal(Vec64::new(d).expect("dim > 0"))
        })
        .collect();
    (a, KChain::new(entries).expect("n > 0"))
}
