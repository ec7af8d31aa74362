//! A small CPU tensor engine: 3D convolution, batch normalization, pooling,
//! upsampling, activations, dense layers, losses, reverse-mode gradients and
//! Adam.

mod adam;
mod conv;
mod graph;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use graph::{sigmoid, Activation, BatchNormMode, BatchNormStats, Graph, Var, BCE_CLAMP};
pub use tensor::{Scalar, Tensor};

use rand::Rng;

/// Kaiming-uniform initialisation for ReLU networks: `U(-b, b)` with
/// `b = sqrt(6 / fan_in)`.
pub fn kaiming_uniform<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(rng.random_range(-bound..bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

#[cfg(test)]
mod tests;
