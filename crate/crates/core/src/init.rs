//! Deterministic parameter initialization.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::Tensor;

pub type InitRng = ChaCha8Rng;

/// Epsilon inside every layer norm of the model.
pub const LN_EPS: f64 = 1e-5;

/// Glorot-uniform samples in `±sqrt(6 / (fan_in + fan_out))`.
pub fn xavier(rng: &mut InitRng, shape: &[usize], fan_in: usize, fan_out: usize) -> Result<Tensor> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    Tensor::param(
        (0..n).map(|_| rng.random_range(-limit..limit)).collect(),
        shape,
    )
}

/// Linear weight stored as `[din, dout]`.
pub fn linear_weight(rng: &mut InitRng, din: usize, dout: usize) -> Result<Tensor> {
    xavier(rng, &[din, dout], din, dout)
}

pub fn filled(shape: &[usize], value: f64) -> Result<Tensor> {
    Tensor::param(vec![value; shape.iter().product()], shape)
}
