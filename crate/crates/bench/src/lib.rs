//! Benchmark-only crate; see `benches/`.

use sslf_core::{SeededRng, Tensor};

/// Uniform `[0, 1)` tensor from a fixed seed.
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = SeededRng::new(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.uniform() as f32)
}
