//! CGAN discriminator: four stride-2 conv blocks, spatial mean, a scalar
//! projection and a sigmoid.
//!
//! Blocks 1-3 are conv + batch norm + relu; block 4 is a bare conv.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::conv_weight;
use crate::error::{GmmtError, Result};
use crate::scalar::Scalar;
use crate::tensor::{BatchNormMode, BatchStats, Bound, Graph, ParamSet, Tensor, Var};

pub const BLOCKS: usize = 4;
const NORMED_BLOCKS: usize = 3;
const BN_MOMENTUM: f64 = 0.1;
/// Four stride-2 stages need at least this extent.
pub const MIN_EXTENT: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub feature_channels: usize,
    pub height: usize,
    pub width: usize,
    pub base_channels: usize,
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < MIN_EXTENT || self.width < MIN_EXTENT {
            return Err(GmmtError::config(format!(
                "discriminator needs spatial extent >= {MIN_EXTENT} for four stride-2 blocks, got {}x{}",
                self.height, self.width
            )));
        }
        if self.feature_channels == 0 || self.base_channels == 0 {
            return Err(GmmtError::config("discriminator channel counts must be positive"));
        }
        Ok(())
    }

    /// Output widths of the four blocks.
    pub fn widths(&self) -> [usize; BLOCKS] {
        let b = self.base_channels;
        [b, 2 * b, 2 * b, 2 * b]
    }
}

/// Running mean/variance of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator<T> {
    pub config: DiscriminatorConfig,
    pub params: ParamSet<T>,
    pub running: Vec<BnStats<T>>,
    /// `(param index of conv weight, has_norm)` per block.
    layout: Vec<(usize, bool)>,
}

impl<T: Scalar> Discriminator<T> {
    pub fn new<R: Rng + ?Sized>(config: DiscriminatorConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut ps = ParamSet::new();
        let mut layout = Vec::with_capacity(BLOCKS);
        let mut running = Vec::new();
        let mut cin = 3 * config.feature_channels;
        for (i, &cout) in config.widths().iter().enumerate() {
            let at = ps.push(format!("block{i}.conv.weight"), conv_weight(rng, cout, cin));
            ps.push(format!("block{i}.conv.bias"), Tensor::zeros(&[cout]));
            let normed = i < NORMED_BLOCKS;
            if normed {
                ps.push(format!("block{i}.bn.gamma"), Tensor::full(&[cout], T::one()));
                ps.push(format!("block{i}.bn.beta"), Tensor::zeros(&[cout]));
                running.push(BnStats { mean: vec![T::zero(); cout], var: vec![T::one(); cout] });
            }
            layout.push((at, normed));
            cin = cout;
        }
        ps.push("proj.weight", super::fan_in_uniform(rng, &[1, cin], cin));
        ps.push("proj.bias", Tensor::zeros(&[1]));
        let d = Discriminator { config, params: ps, running, layout };
        d.check_structure()?;
        Ok(d)
    }

    /// Exactly four blocks; normalisation + activation on the first three only.
    pub fn check_structure(&self) -> Result<()> {
        let ok = self.layout.len() == BLOCKS
            && self.layout.iter().enumerate().all(|(i, &(_, normed))| normed == (i < NORMED_BLOCKS))
            && self.running.len() == NORMED_BLOCKS;
        if ok {
            Ok(())
        } else {
            Err(GmmtError::config("discriminator block structure violated"))
        }
    }

    /// Per-block flags `(has_norm, has_relu)`.
    pub fn block_structure(&self) -> Vec<(bool, bool)> {
        self.layout.iter().map(|&(_, n)| (n, n)).collect()
    }

    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        self.params.bind(g)
    }

    /// Probability that `x` is a real fused map given the modality features.
    /// Returns `[N, 1]` and, with `use_batch_stats`, the batch statistics of
    /// the three normalised blocks (not applied; see [`Self::update_running`]).
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        f_rgb: Var,
        f_tir: Var,
        use_batch_stats: bool,
    ) -> Result<(Var, Vec<BatchStats<T>>)> {
        let c = &self.config;
        for v in [x, f_rgb, f_tir] {
            let s = g.shape(v);
            if s.len() != 4 || s[1..] != [c.feature_channels, c.height, c.width] {
                return Err(GmmtError::shape(format!("discriminator input {s:?}")));
            }
        }
        let mut h = g.concat(&[x, f_rgb, f_tir])?;
        let mut stats = Vec::new();
        let mut norm_idx = 0;
        for &(at, normed) in &self.layout {
            h = g.conv2d(h, p.get(at), p.get(at + 1), 2, 1)?;
            if normed {
                let run = &self.running[norm_idx];
                let mode = if use_batch_stats {
                    BatchNormMode::Train
                } else {
                    BatchNormMode::Eval { mean: &run.mean, var: &run.var }
                };
                let (y, s) = g.batch_norm(h, p.get(at + 2), p.get(at + 3), mode)?;
                stats.extend(s);
                h = g.relu(y);
                norm_idx += 1;
            }
        }
        let pooled = g.spatial_mean(h)?;
        let n = self.params.len();
        let logit = g.linear(pooled, p.get(n - 2), p.get(n - 1))?;
        Ok((g.sigmoid(logit), stats))
    }

    /// Exponential running-average update from train-mode batch statistics.
    pub fn update_running(&mut self, stats: &[BatchStats<T>]) {
        let m = T::lit(BN_MOMENTUM);
        for (run, s) in self.running.iter_mut().zip(stats) {
            for (r, &b) in run.mean.iter_mut().zip(&s.mean) {
                *r = (T::one() - m) * *r + m * b;
            }
            for (r, &b) in run.var.iter_mut().zip(&s.var) {
                *r = (T::one() - m) * *r + m * b;
            }
        }
    }

    /// Graph-free probabilities for concrete batches.
    pub fn score(&self, x: &Tensor<T>, f_rgb: &Tensor<T>, f_tir: &Tensor<T>, use_batch_stats: bool) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g);
        let (a, b, c) = (g.constant(x.clone()), g.constant(f_rgb.clone()), g.constant(f_tir.clone()));
        let (out, _) = self.forward(&mut g, &p, a, b, c, use_batch_stats)?;
        Ok(g.value(out).clone())
    }

    /// Bitwise equality of trainable values and running statistics.
    pub fn state_bit_equal(&self, other: &Self) -> bool {
        self.params.values_bit_equal(&other.params) && self.running == other.running
    }
}
