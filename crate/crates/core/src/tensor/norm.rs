//! Normalisation kernels shared by per-sample channel norm and batch norm.

use crate::scalar::Scalar;

pub(crate) const EPS: f64 = 1e-5;

/// How elements of an `[N, C, H, W]` tensor are pooled into statistics groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Grouping {
    /// One group per (sample, channel) over H*W.
    PerSample,
    /// One group per channel over N*H*W.
    PerBatch,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct NormGeom {
    pub n: usize,
    pub c: usize,
    pub hw: usize,
    pub grouping: Grouping,
    /// Variance floor.
    pub eps: f64,
}

impl NormGeom {
    pub fn groups(&self) -> usize {
        match self.grouping {
            Grouping::PerSample => self.n * self.c,
            Grouping::PerBatch => self.c,
        }
    }

    fn group_size(&self) -> usize {
        match self.grouping {
            Grouping::PerSample => self.hw,
            Grouping::PerBatch => self.n * self.hw,
        }
    }

    fn channel_of(&self, group: usize) -> usize {
        match self.grouping {
            Grouping::PerSample => group % self.c,
            Grouping::PerBatch => group,
        }
    }

    /// Start offsets of the contiguous `hw`-long blocks that form `group`.
    fn blocks(&self, group: usize) -> impl Iterator<Item = usize> + '_ {
        let (first, count, step) = match self.grouping {
            Grouping::PerSample => (group * self.hw, 1, 0),
            Grouping::PerBatch => (group * self.hw, self.n, self.c * self.hw),
        };
        (0..count).map(move |i| first + i * step)
    }
}

pub(crate) struct NormForward<T> {
    pub y: Vec<T>,
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Normalises with statistics computed from `x` itself (population variance).
pub(crate) fn forward<T: Scalar>(x: &[T], gamma: &[T], beta: &[T], g: &NormGeom) -> NormForward<T> {
    let groups = g.groups();
    let size = T::from_usize(g.group_size()).unwrap();
    let eps = T::lit(g.eps);
    let mut out = NormForward {
        y: vec![T::zero(); x.len()],
        xhat: vec![T::zero(); x.len()],
        inv_std: Vec::with_capacity(groups),
        mean: Vec::with_capacity(groups),
        var: Vec::with_capacity(groups),
    };
    for grp in 0..groups {
        let mut sum = T::zero();
        for b in g.blocks(grp) {
            sum += x[b..b + g.hw].iter().copied().sum::<T>();
        }
        let mean = sum / size;
        let mut sq = T::zero();
        for b in g.blocks(grp) {
            sq += x[b..b + g.hw].iter().map(|&v| (v - mean) * (v - mean)).sum::<T>();
        }
        let var = sq / size;
        let inv = T::one() / (var + eps).sqrt();
        let ch = g.channel_of(grp);
        for b in g.blocks(grp) {
            for i in b..b + g.hw {
                let xh = (x[i] - mean) * inv;
                out.xhat[i] = xh;
                out.y[i] = gamma[ch] * xh + beta[ch];
            }
        }
        out.inv_std.push(inv);
        out.mean.push(mean);
        out.var.push(var);
    }
    out
}

/// Normalises per channel with fixed (running) statistics.
pub(crate) fn forward_fixed<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    var: &[T],
    g: &NormGeom,
) -> NormForward<T> {
    debug_assert_eq!(g.grouping, Grouping::PerBatch);
    let eps = T::lit(g.eps);
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    for ch in 0..g.c {
        for b in g.blocks(ch) {
            for i in b..b + g.hw {
                let xh = (x[i] - mean[ch]) * inv_std[ch];
                xhat[i] = xh;
                y[i] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    NormForward { y, xhat, inv_std, mean: mean.to_vec(), var: var.to_vec() }
}

pub(crate) struct NormGrads<T> {
    pub dx: Vec<T>,
    pub dgamma: Vec<T>,
    pub dbeta: Vec<T>,
}

/// Backward pass. With `fixed_stats` the statistics are treated as constants.
pub(crate) fn backward<T: Scalar>(
    dy: &[T],
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
    g: &NormGeom,
    fixed_stats: bool,
) -> NormGrads<T> {
    let mut dx = vec![T::zero(); dy.len()];
    let mut dgamma = vec![T::zero(); g.c];
    let mut dbeta = vec![T::zero(); g.c];
    let size = T::from_usize(g.group_size()).unwrap();
    for grp in 0..g.groups() {
        let ch = g.channel_of(grp);
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for b in g.blocks(grp) {
            for i in b..b + g.hw {
                sum_dy += dy[i];
                sum_dy_xhat += dy[i] * xhat[i];
            }
        }
        dgamma[ch] += sum_dy_xhat;
        dbeta[ch] += sum_dy;
        let scale = gamma[ch] * inv_std[grp];
        if fixed_stats {
            for b in g.blocks(grp) {
                for i in b..b + g.hw {
                    dx[i] = scale * dy[i];
                }
            }
        } else {
            let mean_dy = sum_dy / size;
            let mean_dy_xhat = sum_dy_xhat / size;
            for b in g.blocks(grp) {
                for i in b..b + g.hw {
                    dx[i] = scale * (dy[i] - mean_dy - xhat[i] * mean_dy_xhat);
                }
            }
        }
    }
    NormGrads { dx, dgamma, dbeta }
}
