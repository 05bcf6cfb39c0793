//! Trainable parameters and the SGD update.

use super::graph::{Graph, Var};
use super::Tensor;
use crate::error::{GmmtError, Result};
use crate::scalar::Scalar;

/// A learnable tensor with its gradient accumulator and momentum buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub momentum: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        let momentum = Tensor::zeros(value.shape());
        Param { value, grad, momentum }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(T::zero());
    }
}

/// Ordered, named parameters of one network. Names double as checkpoint
/// section names.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T> {
    entries: Vec<(String, Param<T>)>,
}

/// Graph handles for a [`ParamSet`] bound into one forward pass, in set order.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Wraps existing leaves, in parameter order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound(vars)
    }

    pub fn get(&self, i: usize) -> Var {
        self.0[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    /// Appends a parameter and returns its index.
    pub fn push(&mut self, name: impl Into<String>, value: Tensor<T>) -> usize {
        self.entries.push((name.into(), Param::new(value)));
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, p)| p.value.len()).sum()
    }

    pub fn get(&self, i: usize) -> &Param<T> {
        &self.entries[i].1
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Param<T> {
        &mut self.entries[i].1
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, p)| p)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, p)| p)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(n, p)| (n.as_str(), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.entries.iter_mut().map(|(n, p)| (n.as_str(), p))
    }

    /// Places every parameter on `g` as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        Bound(self.entries.iter().map(|(_, p)| g.leaf(p.value.clone())).collect())
    }

    /// Adds the gradients computed on `g` into each parameter's accumulator.
    pub fn accumulate_grads(&mut self, g: &Graph<T>, bound: &Bound) {
        for ((_, p), &v) in self.entries.iter_mut().zip(&bound.0) {
            if let Some(d) = g.grad(v) {
                for (a, &b) in p.grad.data_mut().iter_mut().zip(d.data()) {
                    *a += b;
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for (_, p) in &mut self.entries {
            p.zero_grad();
        }
    }

    /// Bitwise equality of parameter values (ignores grads and momentum).
    pub fn values_bit_equal(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|((na, a), (nb, b))| {
                na == nb
                    && a.value.shape() == b.value.shape()
                    && a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_f64_lossy().to_bits() == y.to_f64_lossy().to_bits())
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// One SGD step with momentum and L2 weight decay:
/// `buf = momentum * buf + grad + weight_decay * value; value -= lr * buf`.
/// Gradients are zeroed afterwards. A non-finite gradient aborts before any
/// parameter is touched.
pub fn sgd_step<T: Scalar>(params: &mut ParamSet<T>, cfg: &SgdConfig) -> Result<()> {
    for (name, p) in params.iter() {
        if let Some(i) = p.grad.data().iter().position(|g| !g.is_finite()) {
            return Err(GmmtError::numeric(format!(
                "non-finite gradient in '{name}' at element {i} (value {})",
                p.grad.data()[i]
            )));
        }
    }
    let lr = T::lit(cfg.lr);
    let mom = T::lit(cfg.momentum);
    let wd = T::lit(cfg.weight_decay);
    for (_, p) in params.iter_mut() {
        let Param { value, grad, momentum } = p;
        for ((v, g), b) in value.data_mut().iter_mut().zip(grad.data_mut().iter_mut()).zip(momentum.data_mut()) {
            *b = mom * *b + *g + wd * *v;
            *v -= lr * *b;
            *g = T::zero();
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64, grad: f64) -> ParamSet<f64> {
        let mut ps = ParamSet::new();
        ps.push("w", Tensor::scalar(value));
        ps.get_mut(0).grad = Tensor::scalar(grad);
        ps
    }

    #[test]
    fn vanilla_step_moves_by_lr_times_grad() {
        let mut ps = single(1.0, 0.5);
        sgd_step(&mut ps, &SgdConfig { lr: 0.1, momentum: 0.0, weight_decay: 0.0 }).unwrap();
        assert!((ps.get(0).value.item() - 0.95).abs() < 1e-15);
        assert_eq!(ps.get(0).grad.item(), 0.0);
    }

    #[test]
    fn zero_grad_leaves_value() {
        let mut ps = single(1.25, 0.0);
        sgd_step(&mut ps, &SgdConfig { lr: 0.3, momentum: 0.9, weight_decay: 0.0 }).unwrap();
        assert_eq!(ps.get(0).value.item(), 1.25);
    }

    #[test]
    fn two_momentum_steps_accumulate_two_point_nine_g() {
        let g = 0.25;
        let mut ps = single(0.0, g);
        let cfg = SgdConfig { lr: 1.0, momentum: 0.9, weight_decay: 0.0 };
        sgd_step(&mut ps, &cfg).unwrap();
        ps.get_mut(0).grad = Tensor::scalar(g);
        sgd_step(&mut ps, &cfg).unwrap();
        assert!((ps.get(0).value.item() + 2.9 * g).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_aborts_untouched() {
        let mut ps = single(1.0, f64::NAN);
        let err = sgd_step(&mut ps, &SgdConfig { lr: 0.1, momentum: 0.0, weight_decay: 0.0 }).unwrap_err();
        assert!(matches!(err, GmmtError::Numeric(_)));
        assert_eq!(ps.get(0).value.item(), 1.0);
    }
}
