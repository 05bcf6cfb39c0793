//! Conditional U-shaped network.
//!
//! Input is the channel concatenation `(x_t, f_rgb, f_tir, f_t)` where `f_t`
//! is a learned projection of the sinusoidal timestep embedding broadcast
//! over the grid. `n` encoder blocks (conv3x3, per-channel norm, relu) are
//! mirrored by `n` decoder blocks; decoder block `i` consumes its
//! predecessor's output concatenated with the output of encoder block
//! `n - 1 - i` (0-based). Resolution stays constant. A final conv projects the
//! last decoder output concatenated with `x_t` to `C` channels; it starts at
//! zero, so an untrained model predicts zero. The direct `x_t` input gives the
//! projection a linear path for the near-identity noise estimate at large `t`.
//!
//! Parameter count for `n` blocks, width `B`, `C` feature channels and time
//! width `E`:
//!
//! ```text
//! E*E + E                                  time projection
//! + (3C + E)*B*9 + 3B                      first encoder block
//! + (n - 1) * (B*B*9 + 3B)                 remaining encoder blocks
//! + n * (2B*B*9 + 3B)                      decoder blocks
//! + (B + C)*C*9 + C                        output projection
//! ```
//!
//! (each block's `3B` is conv bias plus norm scale and shift).

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::conv_weight;
use crate::error::{GmmtError, Result};
use crate::scalar::Scalar;
use crate::tensor::{Bound, Graph, ParamSet, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// Encoder/decoder block pairs.
    pub blocks: usize,
    pub base_channels: usize,
    pub feature_channels: usize,
    pub height: usize,
    pub width: usize,
    pub time_embed_dim: usize,
    /// Largest accepted timestep (the schedule's `T`).
    pub max_timestep: usize,
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 {
            return Err(GmmtError::config("denoiser needs at least one block"));
        }
        if self.base_channels == 0 || self.feature_channels == 0 || self.height == 0 || self.width == 0 {
            return Err(GmmtError::config(format!("denoiser extents must be positive: {self:?}")));
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return Err(GmmtError::config(format!("time_embed_dim must be positive and even, got {}", self.time_embed_dim)));
        }
        if self.max_timestep == 0 {
            return Err(GmmtError::config("max_timestep must be positive"));
        }
        Ok(())
    }

    /// Closed-form parameter count of the architecture.
    pub fn param_count(&self) -> usize {
        let (n, b, c, e) = (self.blocks, self.base_channels, self.feature_channels, self.time_embed_dim);
        e * e + e + (3 * c + e) * b * 9 + 3 * b + (n - 1) * (b * b * 9 + 3 * b) + n * (2 * b * b * 9 + 3 * b) + (b + c) * c * 9 + c
    }

    fn input_channels(&self) -> usize {
        3 * self.feature_channels + self.time_embed_dim
    }
}

/// `[sin(t w_0), cos(t w_0), sin(t w_1), cos(t w_1), ...]` with
/// `w_k = 10000^(-2k/dim)`.
pub fn sinusoidal_embedding(t: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(GmmtError::config(format!("embedding dimension must be positive and even, got {dim}")));
    }
    let mut out = Vec::with_capacity(dim);
    for k in 0..dim / 2 {
        let arg = t as f64 / 10000f64.powf(2.0 * k as f64 / dim as f64);
        out.push(arg.sin());
        out.push(arg.cos());
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser<T> {
    pub config: DenoiserConfig,
    pub params: ParamSet<T>,
}

const PER_BLOCK: usize = 4;

impl<T: Scalar> Denoiser<T> {
    pub fn new<R: Rng + ?Sized>(config: DenoiserConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (b, c, e) = (config.base_channels, config.feature_channels, config.time_embed_dim);
        let mut ps = ParamSet::new();
        ps.push("time.weight", super::fan_in_uniform(rng, &[e, e], e));
        ps.push("time.bias", Tensor::zeros(&[e]));
        let block = |ps: &mut ParamSet<T>, name: String, cin: usize, rng: &mut R| {
            ps.push(format!("{name}.conv.weight"), conv_weight(rng, b, cin));
            ps.push(format!("{name}.conv.bias"), Tensor::zeros(&[b]));
            ps.push(format!("{name}.norm.gamma"), Tensor::full(&[b], T::one()));
            ps.push(format!("{name}.norm.beta"), Tensor::zeros(&[b]));
        };
        for i in 0..config.blocks {
            let cin = if i == 0 { config.input_channels() } else { b };
            block(&mut ps, format!("enc{i}"), cin, rng);
        }
        for i in 0..config.blocks {
            block(&mut ps, format!("dec{i}"), 2 * b, rng);
        }
        ps.push("out.weight", Tensor::zeros(&[c, b + c, 3, 3]));
        ps.push("out.bias", Tensor::zeros(&[c]));
        assert_eq!(ps.numel(), config.param_count(), "parameter count drifted from the documented formula");
        Ok(Denoiser { config, params: ps })
    }

    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        self.params.bind(g)
    }

    fn check_input(&self, g: &Graph<T>, v: Var, n: usize, what: &str) -> Result<()> {
        let c = &self.config;
        let want = [n, c.feature_channels, c.height, c.width];
        if g.shape(v) != want {
            return Err(GmmtError::shape(format!("denoiser {what}: expected {want:?}, got {:?}", g.shape(v))));
        }
        Ok(())
    }

    /// Forward pass on a batch. `t[i]` is the timestep flag of item `i`.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x_t: Var,
        f_rgb: Var,
        f_tir: Var,
        t: &[usize],
    ) -> Result<Var> {
        let cfg = &self.config;
        let n = g.shape(x_t).first().copied().unwrap_or(0);
        self.check_input(g, x_t, n, "x_t")?;
        self.check_input(g, f_rgb, n, "f_rgb")?;
        self.check_input(g, f_tir, n, "f_tir")?;
        if t.len() != n {
            return Err(GmmtError::shape(format!("{} timesteps for batch of {n}", t.len())));
        }
        if let Some(&bad) = t.iter().find(|&&t| t > cfg.max_timestep) {
            return Err(GmmtError::config(format!("timestep {bad} exceeds {}", cfg.max_timestep)));
        }
        let e = cfg.time_embed_dim;
        let mut emb = Vec::with_capacity(n * e);
        for &ti in t {
            emb.extend(sinusoidal_embedding(ti, e)?.into_iter().map(T::lit));
        }
        let emb = g.constant(Tensor::from_vec(vec![n, e], emb)?);
        let temb = g.linear(emb, p.get(0), p.get(1))?;
        let temb = g.broadcast_spatial(temb, cfg.height, cfg.width)?;
        let mut h = g.concat(&[x_t, f_rgb, f_tir, temb])?;

        let block = |g: &mut Graph<T>, h: Var, at: usize| -> Result<Var> {
            let y = g.conv2d(h, p.get(at), p.get(at + 1), 1, 1)?;
            let y = g.channel_norm(y, p.get(at + 2), p.get(at + 3))?;
            Ok(g.relu(y))
        };
        let mut skips = Vec::with_capacity(cfg.blocks);
        let mut at = 2;
        for _ in 0..cfg.blocks {
            h = block(g, h, at)?;
            skips.push(h);
            at += PER_BLOCK;
        }
        for _ in 0..cfg.blocks {
            let skip = skips.pop().expect("one skip per encoder block");
            let joined = g.concat(&[h, skip])?;
            h = block(g, joined, at)?;
            at += PER_BLOCK;
        }
        let h = g.concat(&[h, x_t])?;
        g.conv2d(h, p.get(at), p.get(at + 1), 1, 1)
    }

    /// Graph-free evaluation on concrete batches.
    pub fn predict(&self, x_t: &Tensor<T>, f_rgb: &Tensor<T>, f_tir: &Tensor<T>, t: &[usize]) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g);
        let (x, r, i) = (g.constant(x_t.clone()), g.constant(f_rgb.clone()), g.constant(f_tir.clone()));
        let out = self.forward(&mut g, &p, x, r, i, t)?;
        Ok(g.value(out).clone())
    }

    /// True when every parameter is finite.
    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|(_, p)| p.value.all_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_tensor, stream};

    pub(crate) fn small() -> DenoiserConfig {
        DenoiserConfig {
            blocks: 2,
            base_channels: 16,
            feature_channels: 4,
            height: 8,
            width: 8,
            time_embed_dim: 8,
            max_timestep: 1000,
        }
    }

    #[test]
    fn embedding_at_zero() {
        let e = sinusoidal_embedding(0, 8).unwrap();
        for k in 0..4 {
            assert_eq!(e[2 * k], 0.0);
            assert_eq!(e[2 * k + 1], 1.0);
        }
        assert!(sinusoidal_embedding(3, 7).is_err());
    }

    #[test]
    fn embedding_matches_formula_at_t1000() {
        let e = sinusoidal_embedding(1000, 8).unwrap();
        let freqs: [f64; 4] = [1.0, 0.1, 0.01, 0.001];
        for (k, f) in freqs.iter().enumerate() {
            assert!((e[2 * k] - (1000.0 * f).sin()).abs() < 1e-12);
            assert!((e[2 * k + 1] - (1000.0 * f).cos()).abs() < 1e-12);
        }
    }

    #[test]
    fn embeddings_are_distinct_over_the_schedule() {
        let all: Vec<Vec<f64>> = (0..=1000).map(|t| sinusoidal_embedding(t, 8).unwrap()).collect();
        let mut min_gap = f64::INFINITY;
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                let d = all[i].iter().zip(&all[j]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                min_gap = min_gap.min(d);
            }
        }
        assert!(min_gap > 1e-6, "closest pair differs by only {min_gap}");
    }

    #[test]
    fn param_count_matches_hand_count() {
        // time 8*8+8=72; enc0 (12+8)*16*9+48=2928; enc1 2304+48=2352;
        // dec 2*(4608+48)=9312; out (16+4)*4*9+4=724
        assert_eq!(small().param_count(), 72 + 2928 + 2352 + 9312 + 724);
        let d = Denoiser::<f64>::new(small(), &mut stream(1, 1)).unwrap();
        assert_eq!(d.params.numel(), 15388);
    }

    #[test]
    fn zero_output_projection_gives_zero_output() {
        let d = Denoiser::<f64>::new(small(), &mut stream(3, 1)).unwrap();
        let mut r = stream(4, 0);
        let x: Tensor<f64> = normal_tensor(&mut r, &[2, 4, 8, 8]);
        let out = d.predict(&x, &x, &x, &[5, 900]).unwrap();
        assert_eq!(out.shape(), &[2, 4, 8, 8]);
        assert!(out.data().iter().all(|&v| v == 0.0));
        let w = d.params.by_name("out.weight").unwrap();
        assert!(w.value.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let a = Denoiser::<f64>::new(small(), &mut stream(9, 1)).unwrap();
        let b = Denoiser::<f64>::new(small(), &mut stream(9, 1)).unwrap();
        let c = Denoiser::<f64>::new(small(), &mut stream(10, 1)).unwrap();
        assert!(a.params.values_bit_equal(&b.params));
        assert!(!a.params.values_bit_equal(&c.params));
    }

    #[test]
    fn rejects_bad_inputs() {
        let d = Denoiser::<f64>::new(small(), &mut stream(1, 1)).unwrap();
        let x = Tensor::<f64>::zeros(&[1, 4, 8, 8]);
        let wrong = Tensor::<f64>::zeros(&[1, 3, 8, 8]);
        assert!(matches!(d.predict(&x, &wrong, &x, &[1]), Err(GmmtError::Shape(_))));
        assert!(matches!(d.predict(&x, &x, &x, &[1001]), Err(GmmtError::Config(_))));
        let mut bad = small();
        bad.time_embed_dim = 7;
        assert!(Denoiser::<f64>::new(bad, &mut stream(1, 1)).is_err());
    }
}
