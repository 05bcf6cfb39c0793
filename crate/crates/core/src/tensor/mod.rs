//! Dense tensors and the reverse-mode gradient tape built on top of them.
//!
//! Layout is row-major. Image-like tensors are either a single feature map
//! `[C, H, W]` or a batch `[N, C, H, W]`; graph ops work on batches.

mod conv;
pub mod gradcheck;
pub mod graph;
mod norm;
pub mod param;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{BatchNormMode, BatchStats, Graph, Var};
pub use param::{sgd_step, Bound, Param, ParamSet, SgdConfig};

use crate::error::{GmmtError, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

/// A single per-modality or fused feature map, shape `[C, H, W]`.
pub type FeatureMap<T> = Tensor<T>;

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(GmmtError::shape(format!(
                "shape {shape:?} holds {n} elements but data has {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![T::zero(); shape.iter().product()] }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(GmmtError::shape(format!("cannot reshape {:?} to {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_shape(other, "zip_map")?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn expect_same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(GmmtError::shape(format!("{what}: {:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_usize(self.data.len().max(1)).unwrap()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    /// Mean squared difference; the non-graph counterpart of `Graph::mse`.
    pub fn mse(&self, other: &Self) -> Result<T> {
        self.expect_same_shape(other, "mse")?;
        let n = T::from_usize(self.data.len().max(1)).unwrap();
        Ok(self.data.iter().zip(&other.data).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>() / n)
    }

    /// Converts between scalar types (values pass through `f64`).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|x| U::lit(x.to_f64_lossy())).collect() }
    }

    /// `[C, H, W]` extents of a feature map or of each item of a batch.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            [c, h, w] | [_, c, h, w] => Ok((*c, *h, *w)),
            s => Err(GmmtError::shape(format!("expected [C,H,W] or [N,C,H,W], got {s:?}"))),
        }
    }

    pub fn batch_len(&self) -> usize {
        if self.shape.len() == 4 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Stacks equally shaped `[C, H, W]` maps into `[N, C, H, W]`.
    pub fn stack(items: &[&Tensor<T>]) -> Result<Self> {
        let first = items.first().ok_or_else(|| GmmtError::shape("stack of zero tensors"))?;
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            first.expect_same_shape(t, "stack")?;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor { shape, data })
    }

    /// Item `i` of a batch as a tensor with the leading axis removed.
    pub fn unstack(&self, i: usize) -> Self {
        let per = self.data.len() / self.shape[0];
        Tensor { shape: self.shape[1..].to_vec(), data: self.data[i * per..(i + 1) * per].to_vec() }
    }

    /// Concatenates along the channel axis (axis 0 of a map, axis 1 of a batch).
    pub fn concat_channels(parts: &[&Tensor<T>]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| GmmtError::shape("concat of zero tensors"))?;
        let rank = first.shape.len();
        if rank != 3 && rank != 4 {
            return Err(GmmtError::shape(format!("concat expects rank 3 or 4, got {:?}", first.shape)));
        }
        let caxis = rank - 3;
        let batch = if rank == 4 { first.shape[0] } else { 1 };
        let (hh, ww) = (first.shape[caxis + 1], first.shape[caxis + 2]);
        let mut total_c = 0;
        for p in parts {
            if p.shape.len() != rank
                || p.shape[caxis + 1] != hh
                || p.shape[caxis + 2] != ww
                || (rank == 4 && p.shape[0] != batch)
            {
                return Err(GmmtError::shape(format!(
                    "channel concat spatial mismatch: {:?} vs {:?}",
                    first.shape, p.shape
                )));
            }
            total_c += p.shape[caxis];
        }
        let plane = hh * ww;
        let mut data = Vec::with_capacity(batch * total_c * plane);
        for n in 0..batch {
            for p in parts {
                let per = p.shape[caxis] * plane;
                data.extend_from_slice(&p.data[n * per..(n + 1) * per]);
            }
        }
        let mut shape = first.shape.clone();
        shape[caxis] = total_c;
        Ok(Tensor { shape, data })
    }

    /// Channels `[start, start + len)` along the channel axis.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Self> {
        let rank = self.shape.len();
        if rank != 3 && rank != 4 {
            return Err(GmmtError::shape(format!("slice expects rank 3 or 4, got {:?}", self.shape)));
        }
        let caxis = rank - 3;
        let c = self.shape[caxis];
        if start + len > c {
            return Err(GmmtError::shape(format!("channel slice {start}..{} of {c}", start + len)));
        }
        let batch = if rank == 4 { self.shape[0] } else { 1 };
        let plane = self.shape[caxis + 1] * self.shape[caxis + 2];
        let mut data = Vec::with_capacity(batch * len * plane);
        for n in 0..batch {
            let base = (n * c + start) * plane;
            data.extend_from_slice(&self.data[base..base + len * plane]);
        }
        let mut shape = self.shape.clone();
        shape[caxis] = len;
        Ok(Tensor { shape, data })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Tensor::<f64>::from_vec(vec![2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn concat_then_slice_round_trips() {
        let a = Tensor::<f64>::from_vec(vec![2, 1, 2, 2], (0..8).map(f64::from).collect()).unwrap();
        let b = Tensor::<f64>::from_vec(vec![2, 2, 2, 2], (0..16).map(|x| f64::from(x) * 0.5).collect()).unwrap();
        let c = Tensor::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[2, 3, 2, 2]);
        assert_eq!(c.slice_channels(0, 1).unwrap(), a);
        assert_eq!(c.slice_channels(1, 2).unwrap(), b);
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let a = Tensor::<f64>::zeros(&[1, 2, 2]);
        let b = Tensor::<f64>::zeros(&[1, 3, 2]);
        assert!(matches!(Tensor::concat_channels(&[&a, &b]), Err(GmmtError::Shape(_))));
    }

    #[test]
    fn stack_and_unstack() {
        let a = Tensor::<f32>::full(&[1, 2, 2], 1.0);
        let b = Tensor::<f32>::full(&[1, 2, 2], 2.0);
        let s = Tensor::stack(&[&a, &b]).unwrap();
        assert_eq!(s.shape(), &[2, 1, 2, 2]);
        assert_eq!(s.unstack(1), b);
    }
}
