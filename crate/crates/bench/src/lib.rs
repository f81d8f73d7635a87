//! Shared inputs for the benchmarks.

use dwsep_core::{Rng, Tensor};

/// Standard-normal tensor from a fixed stream.
pub fn randn(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = Rng::new(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.normal() as f32).collect())
        .expect("shape matches data")
}
