//! Seeded random streams.
//!
//! Every stochastic routine draws from a ChaCha stream addressed by
//! `(seed, stream)`, so independent consumers never share a sequence and a
//! run is reproducible from its seed alone.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub type SeededRng = ChaCha8Rng;

/// Named stream ids. Keeping them in one place avoids accidental reuse.
pub mod streams {
    pub const INIT_DENOISER: u64 = 1;
    pub const INIT_DISCRIMINATOR: u64 = 2;
    pub const INIT_HEAD: u64 = 3;
    pub const INIT_TYPICAL: u64 = 4;
    pub const TRAIN_SCENARIOS: u64 = 10;
    pub const TRAIN_NOISE: u64 = 11;
    pub const EVAL_SCENARIOS: u64 = 20;
    pub const INFER_NOISE: u64 = 21;
    pub const WORLD: u64 = 30;
}

/// Rng for `stream` under `seed`.
pub fn stream(seed: u64, stream: u64) -> SeededRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Rng for item `index` of `stream`; used where per-item draws must not
/// depend on how items are batched or sharded.
pub fn item_stream(seed: u64, stream: u64, index: u64) -> SeededRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(stream);
    rng
}

pub fn normal<T: Scalar, R: Rng + ?Sized>(rng: &mut R) -> T {
    T::lit(rng.sample::<f64, _>(StandardNormal))
}

pub fn uniform<T: Scalar, R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> T {
    T::lit(rng.random_range(lo..hi))
}

/// Tensor of i.i.d. standard normals.
pub fn normal_tensor<T: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| normal(rng)).collect();
    Tensor::from_vec(shape.to_vec(), data).expect("shape matches data")
}

pub fn uniform_tensor<T: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| uniform(rng, lo, hi)).collect();
    Tensor::from_vec(shape.to_vec(), data).expect("shape matches data")
}
