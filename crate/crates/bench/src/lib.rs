//! Fixtures shared by the benchmarks in `benches/`.

use lct_core::engine::Preset;
use lct_core::{Architecture, OptimConfig, PartitionedModel, Tensor, Trainer};

/// Deterministic values in [-1, 1) without pulling in an RNG.
pub fn filler(n: usize, salt: u64) -> Vec<f64> {
    let mut s = salt.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    (0..n)
        .map(|_| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 11) as f64 / (1u64 << 52) as f64 - 1.0
        })
        .collect()
}

pub fn tensor(shape: &[usize], salt: u64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), filler(n, salt)).expect("shape matches data")
}

/// An MNIST-shaped batch: `[batch, 1, 28, 28]` pixels and labels.
pub fn mnist_batch(batch: usize) -> (Tensor, Vec<usize>) {
    let x = tensor(&[batch, 1, 28, 28], 7);
    (x, (0..batch).map(|i| (i * 7) % 10).collect())
}

pub fn mnist_trainer(preset: &str, n_critics: usize) -> Trainer {
    let p = Preset::parse(preset, 0, 0).expect("known preset");
    let arch = Architecture::build(preset, &p, n_critics, &[1, 28, 28], 10, None).expect("valid split");
    Trainer::new(PartitionedModel::init(arch, 0), &OptimConfig::sgd(0.05, 0.9, 5e-4), &OptimConfig::adam(1e-4))
}
