//! Deterministic weight initialization.

use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// He-style uniform init: U(-sqrt(6/fan_in), +sqrt(6/fan_in)).
pub fn he_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    uniform(rng, shape, bound)
}

/// Scaled uniform init for recurrent matrices: U(-1/sqrt(n), +1/sqrt(n)).
pub fn recurrent_uniform(rng: &mut ChaCha8Rng, shape: &[usize], hidden: usize) -> Tensor {
    let bound = 1.0 / (hidden as f64).sqrt();
    uniform(rng, shape, bound)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}
