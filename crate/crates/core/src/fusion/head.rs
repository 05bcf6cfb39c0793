//! Tracking head and the typical concatenate-then-convolve fusion block.
//!
//! The head is conv3x3 -> per-channel norm -> relu -> conv3x3 with three
//! output channels: a response map (channel 0) and a size map `(w, h)`
//! (channels 1-2). The norm makes the head insensitive to the input scale;
//! its variance floor is large enough that a constant input (an untrained
//! zero-output generator) does not produce outsized gradients.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GmmtError, Result};
use crate::metrics::BBox;
use crate::nets::conv_weight;
use crate::scalar::Scalar;
use crate::tensor::{Bound, Graph, ParamSet, Tensor, Var};

/// Width of the rendered response target.
pub const RESPONSE_SIGMA: f64 = 1.0;

/// Variance floor of the head norm.
pub const HEAD_NORM_EPS: f64 = 1e-2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub hidden_channels: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig { hidden_channels: 16 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<T> {
    pub bbox: BBox,
    /// `[1, H, W]`.
    pub response_map: Tensor<T>,
}

/// Index of the largest value; ties go to the smallest index.
pub fn argmax<T: Scalar>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Unit-peak Gaussian centred at `(cx, cy)` on an `h x w` grid.
pub fn render_response(h: usize, w: usize, cx: f64, cy: f64) -> Vec<f64> {
    let s2 = 2.0 * RESPONSE_SIGMA * RESPONSE_SIGMA;
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            out.push((-(dx * dx + dy * dy) / s2).exp());
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackHead<T> {
    pub config: HeadConfig,
    pub params: ParamSet<T>,
}

impl<T: Scalar> TrackHead<T> {
    pub fn new<R: Rng + ?Sized>(config: HeadConfig, channels: usize, rng: &mut R) -> Result<Self> {
        let k = config.hidden_channels;
        if k == 0 || channels == 0 {
            return Err(GmmtError::config("head channel counts must be positive"));
        }
        let mut ps = ParamSet::new();
        ps.push("conv1.weight", conv_weight(rng, k, channels));
        ps.push("conv1.bias", Tensor::zeros(&[k]));
        ps.push("norm.gamma", Tensor::full(&[k], T::one()));
        ps.push("norm.beta", Tensor::zeros(&[k]));
        ps.push("conv2.weight", conv_weight(rng, 3, k));
        ps.push("conv2.bias", Tensor::zeros(&[3]));
        Ok(TrackHead { config, params: ps })
    }

    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        self.params.bind(g)
    }

    /// `[N, C, H, W]` fused features -> `[N, 3, H, W]` response and size maps.
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, fused: Var) -> Result<Var> {
        let y = g.conv2d(fused, p.get(0), p.get(1), 1, 1)?;
        let y = g.channel_norm_eps(y, p.get(2), p.get(3), HEAD_NORM_EPS)?;
        let y = g.relu(y);
        g.conv2d(y, p.get(4), p.get(5), 1, 1)
    }

    /// Tracking loss against ground-truth boxes: response-map regression onto a
    /// rendered Gaussian plus size regression at the true centre.
    pub fn loss(&self, g: &mut Graph<T>, out: Var, truth: &[BBox]) -> Result<Var> {
        let (n, h, w) = match g.shape(out) {
            &[n, 3, h, w] => (n, h, w),
            s => return Err(GmmtError::shape(format!("head output must be [N,3,H,W], got {s:?}"))),
        };
        if truth.len() != n {
            return Err(GmmtError::shape(format!("{} boxes for batch of {n}", truth.len())));
        }
        let plane = h * w;
        let mut target = Vec::with_capacity(n * plane);
        let mut idx = Vec::with_capacity(2 * n);
        let mut sizes = Vec::with_capacity(2 * n);
        for (i, b) in truth.iter().enumerate() {
            target.extend(render_response(h, w, b.cx, b.cy).into_iter().map(T::lit));
            let cell = grid_cell(b, h, w)?;
            idx.push((i * 3 + 1) * plane + cell);
            idx.push((i * 3 + 2) * plane + cell);
            sizes.push(T::lit(b.w));
            sizes.push(T::lit(b.h));
        }
        let response = g.slice_channels(out, 0, 1)?;
        let target = g.constant(Tensor::from_vec(vec![n, 1, h, w], target)?);
        let l_resp = g.mse(response, target)?;
        let size = g.select(out, &idx)?;
        let size_t = g.constant(Tensor::from_vec(vec![2 * n], sizes)?);
        let l_size = g.mse(size, size_t)?;
        g.add(l_resp, l_size)
    }

    /// Reads predictions off concrete head outputs `[N, 3, H, W]`.
    pub fn decode(out: &Tensor<T>) -> Result<Vec<Prediction<T>>> {
        let (n, h, w) = match out.shape() {
            &[n, 3, h, w] => (n, h, w),
            s => return Err(GmmtError::shape(format!("head output must be [N,3,H,W], got {s:?}"))),
        };
        let plane = h * w;
        Ok((0..n)
            .map(|i| {
                let base = i * 3 * plane;
                let resp = &out.data()[base..base + plane];
                let at = argmax(resp);
                let size = |k: usize| out.data()[base + k * plane + at].to_f64_lossy().max(0.0);
                Prediction {
                    bbox: BBox::new((at % w) as f64, (at / w) as f64, size(1), size(2)),
                    response_map: Tensor::from_vec(vec![1, h, w], resp.to_vec()).expect("plane"),
                }
            })
            .collect())
    }

    /// Graph-free prediction on a batch of fused maps.
    pub fn predict(&self, fused: &Tensor<T>) -> Result<Vec<Prediction<T>>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g);
        let x = g.constant(fused.clone());
        let out = self.forward(&mut g, &p, x)?;
        Self::decode(g.value(out))
    }
}

fn grid_cell(b: &BBox, h: usize, w: usize) -> Result<usize> {
    let (x, y) = (b.cx.round(), b.cy.round());
    if x < 0.0 || y < 0.0 || x as usize >= w || y as usize >= h {
        return Err(GmmtError::data(format!("box centre ({}, {}) outside {h}x{w} grid", b.cx, b.cy)));
    }
    Ok(y as usize * w + x as usize)
}

/// Baseline fusion: channel concatenation followed by one 3x3 conv to `C` channels.
#[derive(Clone, Debug, PartialEq)]
pub struct TypicalFuse<T> {
    pub params: ParamSet<T>,
}

impl<T: Scalar> TypicalFuse<T> {
    pub fn new<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        let mut ps = ParamSet::new();
        ps.push("conv.weight", conv_weight(rng, channels, 2 * channels));
        ps.push("conv.bias", Tensor::zeros(&[channels]));
        TypicalFuse { params: ps }
    }

    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        self.params.bind(g)
    }

    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, f_rgb: Var, f_tir: Var) -> Result<Var> {
        let x = g.concat(&[f_rgb, f_tir])?;
        g.conv2d(x, p.get(0), p.get(1), 1, 1)
    }

    pub fn fuse(&self, f_rgb: &Tensor<T>, f_tir: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g);
        let (a, b) = (g.constant(f_rgb.clone()), g.constant(f_tir.clone()));
        let out = self.forward(&mut g, &p, a, b)?;
        Ok(g.value(out).clone())
    }
}
