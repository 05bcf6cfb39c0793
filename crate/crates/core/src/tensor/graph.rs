//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass: each op appends a node
//! holding its output value plus whatever it needs for the backward sweep.
//! [`Graph::backward`] walks the tape once in reverse.

use super::conv::{self, ConvGeom, KERNEL};
use super::norm::{self, Grouping, NormGeom};
use super::Tensor;
use crate::error::{GmmtError, Result};
use crate::scalar::Scalar;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch statistics produced by a train-mode batch norm, for running-average updates.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased (n-1) variance, the convention used for running statistics.
    pub var: Vec<T>,
}

/// Batch-norm statistics source.
#[derive(Clone, Copy, Debug)]
pub enum BatchNormMode<'a, T> {
    /// Normalise with the current batch's statistics.
    Train,
    /// Normalise with fixed running statistics.
    Eval { mean: &'a [T], var: &'a [T] },
}

enum Op<T> {
    Leaf,
    Conv { x: Var, w: Var, b: Var, geom: ConvGeom, cols: Vec<T> },
    Concat { parts: Vec<(Var, usize)> },
    SliceChannels { x: Var, start: usize },
    Relu { x: Var },
    Sigmoid { x: Var },
    Norm { x: Var, gamma: Var, beta: Var, geom: NormGeom, xhat: Vec<T>, inv_std: Vec<T>, fixed: bool },
    Mse { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: T },
    ScaleBatch { x: Var, coeffs: Vec<T> },
    Linear { x: Var, w: Var, b: Var },
    BroadcastSpatial { x: Var, hw: usize },
    SpatialMean { x: Var, hw: usize },
    Select { x: Var, idx: Vec<usize> },
    Sum { x: Var },
    Dot { x: Var, weights: Vec<T> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv { .. } => "conv2d",
            Op::Concat { .. } => "concat",
            Op::SliceChannels { .. } => "slice_channels",
            Op::Relu { .. } => "relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Norm { .. } => "norm",
            Op::Mse { .. } => "mse",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::ScaleBatch { .. } => "scale_batch",
            Op::Linear { .. } => "linear",
            Op::BroadcastSpatial { .. } => "broadcast_spatial",
            Op::SpatialMean { .. } => "spatial_mean",
            Op::Select { .. } => "select",
            Op::Sum { .. } => "sum",
            Op::Dot { .. } => "dot",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    nonfinite: Option<String>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new(), nonfinite: None }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        if cfg!(debug_assertions) && self.nonfinite.is_none() && !value.all_finite() {
            self.nonfinite = Some(format!("forward value of node {} ({})", self.nodes.len(), op.name()));
        }
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn req(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A value that gradients do not flow into.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable input (parameter or checked input).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` target with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Errors if any forward value or gradient became non-finite.
    /// Values are only tracked in debug/test builds.
    pub fn check_finite(&self) -> Result<()> {
        match &self.nonfinite {
            Some(msg) => Err(GmmtError::numeric(format!("non-finite {msg}"))),
            None => Ok(()),
        }
    }

    /// On/off pattern of every relu input, in tape order. Finite-difference
    /// probes that change this pattern straddle a kink.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu { x } = node.op {
                out.extend(self.nodes[x.0].value.data().iter().map(|&v| v > T::zero()));
            }
        }
        out
    }

    fn batch4(&self, v: Var, what: &str) -> Result<(usize, usize, usize, usize)> {
        match self.shape(v) {
            &[n, c, h, w] => Ok((n, c, h, w)),
            s => Err(GmmtError::shape(format!("{what}: expected [N,C,H,W], got {s:?}"))),
        }
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(GmmtError::shape(format!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    /// 3x3 cross-correlation. `x: [N,Cin,H,W]`, `w: [Cout,Cin,3,3]`, `b: [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (n, cin, h, wd) = self.batch4(x, "conv2d input")?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[1] != cin || ws[2] != KERNEL || ws[3] != KERNEL {
            return Err(GmmtError::shape(format!("conv2d weight {ws:?} for input channels {cin}")));
        }
        let cout = ws[0];
        if self.shape(b) != [cout] {
            return Err(GmmtError::shape(format!("conv2d bias {:?} for {cout} outputs", self.shape(b))));
        }
        if stride == 0 || h + 2 * pad < KERNEL || wd + 2 * pad < KERNEL {
            return Err(GmmtError::shape(format!("conv2d: {h}x{wd} input with pad {pad} stride {stride}")));
        }
        let geom = ConvGeom { n, cin, h, w: wd, cout, stride, pad };
        let (out, cols) = conv::forward(self.value(x).data(), self.value(w).data(), self.value(b).data(), &geom);
        let value = Tensor::from_vec(vec![n, cout, geom.out_h(), geom.out_w()], out)?;
        let rg = self.req(x) || self.req(w) || self.req(b);
        Ok(self.push(value, Op::Conv { x, w, b, geom, cols }, rg))
    }

    /// Concatenation along the channel axis of `[N,C,H,W]` tensors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        for t in &tensors {
            if t.shape().len() != 4 {
                return Err(GmmtError::shape(format!("concat expects [N,C,H,W], got {:?}", t.shape())));
            }
        }
        let value = Tensor::concat_channels(&tensors)?;
        let meta = parts.iter().map(|&p| (p, self.shape(p)[1])).collect();
        let rg = parts.iter().any(|&p| self.req(p));
        Ok(self.push(value, Op::Concat { parts: meta }, rg))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.batch4(x, "slice_channels")?;
        let value = self.value(x).slice_channels(start, len)?;
        let rg = self.req(x);
        Ok(self.push(value, Op::SliceChannels { x, start }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.req(x);
        self.push(value, Op::Relu { x }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        let rg = self.req(x);
        self.push(value, Op::Sigmoid { x }, rg)
    }

    fn norm_params(&self, c: usize, gamma: Var, beta: Var) -> Result<()> {
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(GmmtError::shape(format!(
                "norm affine params {:?}/{:?} for {c} channels",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        Ok(())
    }

    /// Per-sample, per-channel normalisation over H*W with affine `gamma`, `beta`.
    pub fn channel_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        self.channel_norm_eps(x, gamma, beta, norm::EPS)
    }

    /// [`Graph::channel_norm`] with an explicit variance floor.
    pub fn channel_norm_eps(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(GmmtError::config(format!("norm variance floor must be positive, got {eps}")));
        }
        let (n, c, h, w) = self.batch4(x, "channel_norm")?;
        self.norm_params(c, gamma, beta)?;
        let geom = NormGeom { n, c, hw: h * w, grouping: Grouping::PerSample, eps };
        let f = norm::forward(self.value(x).data(), self.value(gamma).data(), self.value(beta).data(), &geom);
        let value = Tensor::from_vec(vec![n, c, h, w], f.y)?;
        let rg = self.req(x) || self.req(gamma) || self.req(beta);
        Ok(self.push(value, Op::Norm { x, gamma, beta, geom, xhat: f.xhat, inv_std: f.inv_std, fixed: false }, rg))
    }

    /// Batch normalisation over (N, H, W) per channel.
    ///
    /// Train mode needs at least two samples and returns the batch statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_, T>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let (n, c, h, w) = self.batch4(x, "batch_norm")?;
        self.norm_params(c, gamma, beta)?;
        let geom = NormGeom { n, c, hw: h * w, grouping: Grouping::PerBatch, eps: norm::EPS };
        let (f, stats, fixed) = match mode {
            BatchNormMode::Train => {
                if n < 2 {
                    return Err(GmmtError::shape(format!("batch_norm in train mode needs >= 2 samples, got {n}")));
                }
                let f = norm::forward(self.value(x).data(), self.value(gamma).data(), self.value(beta).data(), &geom);
                let count = (n * h * w) as f64;
                let unbias = T::lit(count / (count - 1.0).max(1.0));
                let stats = BatchStats { mean: f.mean.clone(), var: f.var.iter().map(|&v| v * unbias).collect() };
                (f, Some(stats), false)
            }
            BatchNormMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(GmmtError::shape("batch_norm running statistics length mismatch"));
                }
                let f = norm::forward_fixed(
                    self.value(x).data(),
                    self.value(gamma).data(),
                    self.value(beta).data(),
                    mean,
                    var,
                    &geom,
                );
                (f, None, true)
            }
        };
        let value = Tensor::from_vec(vec![n, c, h, w], f.y)?;
        let rg = self.req(x) || self.req(gamma) || self.req(beta);
        let v = self.push(value, Op::Norm { x, gamma, beta, geom, xhat: f.xhat, inv_std: f.inv_std, fixed }, rg);
        Ok((v, stats))
    }

    /// Mean squared error, a one-element tensor.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let v = self.value(a).mse(self.value(b))?;
        let rg = self.req(a) || self.req(b);
        Ok(self.push(Tensor::scalar(v), Op::Mse { a, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.req(a) || self.req(b);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.req(a) || self.req(b);
        Ok(self.push(value, Op::Sub { a, b }, rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.req(a) || self.req(b);
        Ok(self.push(value, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v * c);
        let rg = self.req(x);
        self.push(value, Op::Scale { x, c }, rg)
    }

    /// Multiplies item `i` of a batch by `coeffs[i]`.
    pub fn scale_batch(&mut self, x: Var, coeffs: &[T]) -> Result<Var> {
        let n = self.shape(x)[0];
        if coeffs.len() != n {
            return Err(GmmtError::shape(format!("scale_batch: {} coefficients for batch {n}", coeffs.len())));
        }
        let src = self.value(x);
        let per = src.len() / n.max(1);
        let data = src.data().iter().enumerate().map(|(i, &v)| v * coeffs[i / per]).collect();
        let value = Tensor::from_vec(src.shape().to_vec(), data)?;
        let rg = self.req(x);
        Ok(self.push(value, Op::ScaleBatch { x, coeffs: coeffs.to_vec() }, rg))
    }

    /// Dense layer: `x: [N, in]`, `w: [out, in]`, `b: [out]` -> `[N, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, fin) = match self.shape(x) {
            &[n, f] => (n, f),
            s => return Err(GmmtError::shape(format!("linear input must be [N, in], got {s:?}"))),
        };
        let fout = match self.shape(w) {
            &[o, i] if i == fin => o,
            s => return Err(GmmtError::shape(format!("linear weight {s:?} for input width {fin}"))),
        };
        if self.shape(b) != [fout] {
            return Err(GmmtError::shape(format!("linear bias {:?} for {fout} outputs", self.shape(b))));
        }
        let mut out = Vec::with_capacity(n * fout);
        for _ in 0..n {
            out.extend_from_slice(self.value(b).data());
        }
        T::gemm(n, fin, fout, T::one(), self.value(x).data(), (fin, 1), self.value(w).data(), (1, fin), T::one(), &mut out, (fout, 1));
        let value = Tensor::from_vec(vec![n, fout], out)?;
        let rg = self.req(x) || self.req(w) || self.req(b);
        Ok(self.push(value, Op::Linear { x, w, b }, rg))
    }

    /// `[N, C]` -> `[N, C, H, W]` with every plane constant.
    pub fn broadcast_spatial(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let (n, c) = match self.shape(x) {
            &[n, c] => (n, c),
            s => return Err(GmmtError::shape(format!("broadcast_spatial input must be [N, C], got {s:?}"))),
        };
        let hw = h * w;
        let data = self.value(x).data().iter().flat_map(|&v| std::iter::repeat_n(v, hw)).collect();
        let value = Tensor::from_vec(vec![n, c, h, w], data)?;
        let rg = self.req(x);
        Ok(self.push(value, Op::BroadcastSpatial { x, hw }, rg))
    }

    /// `[N, C, H, W]` -> `[N, C]` averaging each plane.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.batch4(x, "spatial_mean")?;
        let hw = h * w;
        let inv = T::one() / T::from_usize(hw).unwrap();
        let data = self.value(x).data().chunks(hw).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        let value = Tensor::from_vec(vec![n, c], data)?;
        let rg = self.req(x);
        Ok(self.push(value, Op::SpatialMean { x, hw }, rg))
    }

    /// Gathers flat elements of `x` into a 1-D tensor.
    pub fn select(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let src = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= src.len()) {
            return Err(GmmtError::shape(format!("select index {bad} out of {}", src.len())));
        }
        let data = idx.iter().map(|&i| src.data()[i]).collect();
        let value = Tensor::from_vec(vec![idx.len()], data)?;
        let rg = self.req(x);
        Ok(self.push(value, Op::Select { x, idx: idx.to_vec() }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.req(x);
        self.push(value, Op::Sum { x }, rg)
    }

    /// `sum(weights * x)` with constant weights.
    pub fn dot(&mut self, x: Var, weights: &[T]) -> Result<Var> {
        if weights.len() != self.value(x).len() {
            return Err(GmmtError::shape("dot weight length mismatch"));
        }
        let v = self.value(x).data().iter().zip(weights).map(|(&a, &b)| a * b).sum();
        let rg = self.req(x);
        Ok(self.push(Tensor::scalar(v), Op::Dot { x, weights: weights.to_vec() }, rg))
    }

    fn accumulate(grads: &mut [Option<Tensor<T>>], nodes: &[Node<T>], v: Var, delta: Vec<T>) {
        if !nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, d) in g.data_mut().iter_mut().zip(delta) {
                    *a += d;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::from_vec(nodes[v.0].value.shape().to_vec(), delta).expect("gradient shape"));
            }
        }
    }

    /// Reverse sweep from the one-element `loss`. Replaces any earlier gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(GmmtError::shape(format!("backward target has shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::scalar(T::one()));
        }
        let nodes = &self.nodes;
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            let node = &nodes[i];
            let dy = gout.data();
            match &node.op {
                Op::Leaf => {}
                Op::Conv { x, w, b, geom, cols } => {
                    let need_dx = nodes[x.0].requires_grad;
                    let g = conv::backward(dy, cols, nodes[w.0].value.data(), geom, need_dx);
                    if let Some(dx) = g.dx {
                        Self::accumulate(&mut grads, nodes, *x, dx);
                    }
                    Self::accumulate(&mut grads, nodes, *w, g.dweight);
                    Self::accumulate(&mut grads, nodes, *b, g.dbias);
                }
                Op::Concat { parts } => {
                    let shape = node.value.shape();
                    let (n, ctot, plane) = (shape[0], shape[1], shape[2] * shape[3]);
                    let mut offset = 0;
                    for &(p, c) in parts {
                        let mut d = Vec::with_capacity(n * c * plane);
                        for s in 0..n {
                            let base = (s * ctot + offset) * plane;
                            d.extend_from_slice(&dy[base..base + c * plane]);
                        }
                        Self::accumulate(&mut grads, nodes, p, d);
                        offset += c;
                    }
                }
                Op::SliceChannels { x, start } => {
                    let xs = nodes[x.0].value.shape();
                    let (n, c, plane) = (xs[0], xs[1], xs[2] * xs[3]);
                    let len = node.value.shape()[1];
                    let mut d = vec![T::zero(); nodes[x.0].value.len()];
                    for s in 0..n {
                        let dst = (s * c + start) * plane;
                        let src = s * len * plane;
                        d[dst..dst + len * plane].copy_from_slice(&dy[src..src + len * plane]);
                    }
                    Self::accumulate(&mut grads, nodes, *x, d);
                }
                Op::Relu { x } => {
                    let xin = nodes[x.0].value.data();
                    let d = dy.iter().zip(xin).map(|(&g, &v)| if v > T::zero() { g } else { T::zero() }).collect();
                    Self::accumulate(&mut grads, nodes, *x, d);
                }
                Op::Sigmoid { x } => {
                    let y = node.value.data();
                    let d = dy.iter().zip(y).map(|(&g, &s)| g * s * (T::one() - s)).collect();
                    Self::accumulate(&mut grads, nodes, *x, d);
                }
                Op::Norm { x, gamma, beta, geom, xhat, inv_std, fixed } => {
                    let g = norm::backward(dy, xhat, inv_std, nodes[gamma.0].value.data(), geom, *fixed);
                    Self::accumulate(&mut grads, nodes, *x, g.dx);
                    Self::accumulate(&mut grads, nodes, *gamma, g.dgamma);
                    Self::accumulate(&mut grads, nodes, *beta, g.dbeta);
                }
                Op::Mse { a, b } => {
                    let av = nodes[a.0].value.data();
                    let bv = nodes[b.0].value.data();
                    let k = T::lit(2.0) * dy[0] / T::from_usize(av.len().max(1)).unwrap();
                    let da: Vec<T> = av.iter().zip(bv).map(|(&p, &q)| k * (p - q)).collect();
                    let db = da.iter().map(|&v| -v).collect();
                    Self::accumulate(&mut grads, nodes, *a, da);
                    Self::accumulate(&mut grads, nodes, *b, db);
                }
                Op::Add { a, b } => {
                    Self::accumulate(&mut grads, nodes, *a, dy.to_vec());
                    Self::accumulate(&mut grads, nodes, *b, dy.to_vec());
                }
                Op::Sub { a, b } => {
                    Self::accumulate(&mut grads, nodes, *a, dy.to_vec());
                    Self::accumulate(&mut grads, nodes, *b, dy.iter().map(|&v| -v).collect());
                }
                Op::Mul { a, b } => {
                    let av = nodes[a.0].value.data();
                    let bv = nodes[b.0].value.data();
                    Self::accumulate(&mut grads, nodes, *a, dy.iter().zip(bv).map(|(&g, &q)| g * q).collect());
                    Self::accumulate(&mut grads, nodes, *b, dy.iter().zip(av).map(|(&g, &p)| g * p).collect());
                }
                Op::Scale { x, c } => {
                    Self::accumulate(&mut grads, nodes, *x, dy.iter().map(|&v| v * *c).collect());
                }
                Op::ScaleBatch { x, coeffs } => {
                    let per = dy.len() / coeffs.len().max(1);
                    let d = dy.iter().enumerate().map(|(i, &v)| v * coeffs[i / per]).collect();
                    Self::accumulate(&mut grads, nodes, *x, d);
                }
                Op::Linear { x, w, b } => {
                    let xs = nodes[x.0].value.shape();
                    let (n, fin) = (xs[0], xs[1]);
                    let fout = node.value.shape()[1];
                    if nodes[x.0].requires_grad {
                        let mut dx = vec![T::zero(); n * fin];
                        T::gemm(n, fout, fin, T::one(), dy, (fout, 1), nodes[w.0].value.data(), (fin, 1), T::zero(), &mut dx, (fin, 1));
                        Self::accumulate(&mut grads, nodes, *x, dx);
                    }
                    let mut dw = vec![T::zero(); fout * fin];
                    T::gemm(fout, n, fin, T::one(), dy, (1, fout), nodes[x.0].value.data(), (fin, 1), T::zero(), &mut dw, (fin, 1));
                    Self::accumulate(&mut grads, nodes, *w, dw);
                    let mut db = vec![T::zero(); fout];
                    for row in dy.chunks(fout) {
                        for (a, &v) in db.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    Self::accumulate(&mut grads, nodes, *b, db);
                }
                Op::BroadcastSpatial { x, hw } => {
                    let d = dy.chunks(*hw).map(|p| p.iter().copied().sum()).collect();
                    Self::accumulate(&mut grads, nodes, *x, d);
                }
                Op::SpatialMean { x, hw } => {
                    let inv = T::one() / T::from_usize(*hw).unwrap();
                    let d = dy.iter().flat_map(|&v| std::iter::repeat_n(v * inv, *hw)).collect();
                    Self::accumulate(&mut grads, nodes, *x, d);
                }
                Op::Select { x, idx } => {
                    let mut d = vec![T::zero(); nodes[x.0].value.len()];
                    for (&i, &g) in idx.iter().zip(dy) {
                        d[i] += g;
                    }
                    Self::accumulate(&mut grads, nodes, *x, d);
                }
                Op::Sum { x } => {
                    Self::accumulate(&mut grads, nodes, *x, vec![dy[0]; nodes[x.0].value.len()]);
                }
                Op::Dot { x, weights } => {
                    Self::accumulate(&mut grads, nodes, *x, weights.iter().map(|&w| w * dy[0]).collect());
                }
            }
            grads[i] = Some(gout);
        }
        if cfg!(debug_assertions) && self.nonfinite.is_none() {
            if let Some(i) = grads.iter().position(|g| g.as_ref().is_some_and(|g| !g.all_finite())) {
                self.nonfinite = Some(format!("gradient at node {i} ({})", self.nodes[i].op.name()));
            }
        }
        self.grads = grads;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_center_of_all_ones_is_nine() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let w = g.leaf(Tensor::full(&[1, 1, 3, 3], 1.0));
        let b = g.leaf(Tensor::zeros(&[1]));
        let y = g.conv2d(x, w, b, 1, 1).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 3, 3]);
        assert_eq!(g.value(y).data()[4], 9.0);
        assert_eq!(g.value(y).data()[0], 4.0);
    }

    #[test]
    fn conv_with_zero_weights_is_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_vec(vec![1, 2, 4, 4], (0..32).map(f64::from).collect()).unwrap());
        let w = g.leaf(Tensor::zeros(&[3, 2, 3, 3]));
        let b = g.leaf(Tensor::zeros(&[3]));
        let y = g.conv2d(x, w, b, 1, 1).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let w = g.leaf(Tensor::zeros(&[1, 3, 3, 3]));
        let b = g.leaf(Tensor::zeros(&[1]));
        assert!(matches!(g.conv2d(x, w, b, 1, 1), Err(GmmtError::Shape(_))));
    }

    #[test]
    fn concat_with_empty_is_identity_and_sum_grad_is_ones() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::full(&[1, 1, 2, 2], 1.0));
        let b = g.leaf(Tensor::full(&[1, 1, 2, 2], 2.0));
        let e = g.constant(Tensor::zeros(&[1, 0, 2, 2]));
        let ae = g.concat(&[a, e]).unwrap();
        assert_eq!(g.value(ae), g.value(a));
        let ab = g.concat(&[a, b]).unwrap();
        assert_eq!(g.value(ab).data(), &[1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]);
        let s = g.sum(ab);
        g.backward(s).unwrap();
        assert!(g.grad(a).unwrap().data().iter().all(|&v| v == 1.0));
        assert!(g.grad(b).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn activations_pointwise() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2], &[0.0, -3.2]));
        let s = g.sigmoid(x);
        let r = g.relu(x);
        assert_eq!(g.value(s).data()[0], 0.5);
        assert_eq!(g.value(r).data()[1], 0.0);
    }

    #[test]
    fn batch_norm_rejects_single_sample_in_train_mode() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(&[1, 2, 2, 2]));
        let ga = g.leaf(Tensor::full(&[2], 1.0));
        let be = g.leaf(Tensor::zeros(&[2]));
        assert!(g.batch_norm(x, ga, be, BatchNormMode::Train).is_err());
        let (_, stats) = g.batch_norm(x, ga, be, BatchNormMode::Eval { mean: &[0.0, 0.0], var: &[1.0, 1.0] }).unwrap();
        assert!(stats.is_none());
    }

    #[test]
    fn mse_values_and_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(t(&[2], &[1.0, 1.0]));
        let b = g.constant(t(&[2], &[0.0, 0.0]));
        let l = g.mse(a, b).unwrap();
        assert_eq!(g.value(l).item(), 1.0);
        g.backward(l).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[1.0, 1.0]);
        let same = g.mse(a, a).unwrap();
        assert_eq!(g.value(same).item(), 0.0);
        let c = g.constant(t(&[3], &[0.0; 3]));
        assert!(g.mse(a, c).is_err());
    }

    #[test]
    fn nonfinite_forward_value_is_reported() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[1], &[f64::MAX]));
        let _ = g.scale(x, 10.0);
        if cfg!(debug_assertions) {
            assert!(matches!(g.check_finite(), Err(GmmtError::Numeric(_))));
        }
    }
}
