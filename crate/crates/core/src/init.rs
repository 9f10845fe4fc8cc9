//! Seeded parameter initializers.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Tensor;

pub const EMBEDDING_STD: f64 = 0.02;

/// Uniform in `±sqrt(6 / (fan_in + fan_out))`, shape `[fan_in, fan_out]`.
pub fn xavier_uniform<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-bound..=bound))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("shape matches data")
}

/// Normal with standard deviation 0.02, shape `[rows, dim]`.
pub fn embedding<R: Rng>(rng: &mut R, rows: usize, dim: usize) -> Tensor {
    let normal = Normal::new(0.0, EMBEDDING_STD).expect("valid std");
    let data = (0..rows * dim).map(|_| normal.sample(rng)).collect();
    Tensor::new(vec![rows, dim], data).expect("shape matches data")
}

pub fn constant(shape: Vec<usize>, value: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, vec![value; n]).expect("shape matches data")
}
