//! The conditional U-shaped denoiser (also the CGAN generator) and the CGAN
//! discriminator.

mod denoiser;
mod discriminator;

pub use denoiser::{sinusoidal_embedding, Denoiser, DenoiserConfig};
pub use discriminator::{BnStats, Discriminator, DiscriminatorConfig};

use rand::Rng;

use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Fan-in scaled uniform init, bound `sqrt(6 / fan_in)`.
pub(crate) fn fan_in_uniform<T: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    rng::uniform_tensor(rng, shape, -bound, bound)
}

pub(crate) fn conv_weight<T: Scalar, R: Rng + ?Sized>(rng: &mut R, cout: usize, cin: usize) -> Tensor<T> {
    fan_in_uniform(rng, &[cout, cin, 3, 3], cin * 9)
}
