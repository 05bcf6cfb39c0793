//! Generative multi-modal feature fusion.
//!
//! A conditional denoiser (or a CGAN generator of the same shape) produces
//! the fused feature map a tracking head consumes, from per-modality feature
//! maps plus noise. The crate carries everything needed to train and evaluate
//! that mechanism on a synthetic two-modality world: a small reverse-mode
//! tensor engine, the diffusion schedule and DDIM sampler, the networks, the
//! three generative training procedures, tracking metrics, and persistence.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision for the common cases.

pub mod config;
pub mod diffusion;
pub mod error;
pub mod fusion;
pub mod golden;
pub mod io;
pub mod metrics;
pub mod nets;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod trainers;

pub use error::{GmmtError, Result};
pub use scalar::Scalar;
pub use tensor::{FeatureMap, Graph, Param, ParamSet, Tensor, Var};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Graph64 = Graph<f64>;
pub type Graph32 = Graph<f32>;
pub type Denoiser64 = nets::Denoiser<f64>;
pub type Denoiser32 = nets::Denoiser<f32>;
pub type Discriminator64 = nets::Discriminator<f64>;
pub type Pipeline64 = fusion::Pipeline<f64>;
pub type Pipeline32 = fusion::Pipeline<f32>;
