//! Inputs shared by the criterion benchmarks in `benches/`.

use rand::Rng;

use smap_core::env::{CHANNELS, SIZE};
use smap_core::rng::stream;
use smap_core::Tensor;

/// Uniform `[0, 1)` observation of the standard shape.
pub fn observation(seed: u64) -> Tensor<f32> {
    let mut rng = stream(seed, &[0x0B5]);
    Tensor::from_fn([CHANNELS, SIZE, SIZE], |_| rng.gen_range(0.0..1.0))
}

/// Uniform `[-1, 1)` square matrix.
pub fn square(n: usize, seed: u64) -> Tensor<f32> {
    let mut rng = stream(seed, &[0x5A]);
    Tensor::from_fn([n, n], |_| rng.gen_range(-1.0..1.0))
}

/// Random binary layer masks (`n×n` each) and output mask (`1×n`).
pub fn binary_masks(n: usize, layers: usize, seed: u64) -> (Vec<Tensor<f64>>, Tensor<f64>) {
    let mut rng = stream(seed, &[0x3A5C]);
    let mut bit = || rng.gen_range(0..2) as f64;
    let ls = (0..layers).map(|_| Tensor::from_fn([n, n], |_| bit())).collect();
    let out = Tensor::from_fn([1, n], |_| bit());
    (ls, out)
}
