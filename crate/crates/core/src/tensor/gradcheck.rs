//! Central finite-difference verification of tape gradients (64-bit only).

use rand::seq::index::sample;

use super::graph::{Graph, Var};
use super::Tensor;
use crate::error::{GmmtError, Result};
use crate::rng;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Denominator floor: errors on gradients smaller than this are measured
    /// against the floor instead of the gradient itself.
    pub floor: f64,
    /// Probe at most this many coordinates per input (all when `None`).
    pub max_coords_per_input: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { step: 1e-5, floor: 1e-2, max_coords_per_input: None, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(|analytic|, |numeric|, floor)` over probed coordinates.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Probes whose +/- step changed a relu on/off pattern; the function is not
    /// differentiable along them so they carry no information.
    pub skipped_kinks: usize,
    /// Analytic gradient of each input.
    pub analytic: Vec<Tensor<f64>>,
}

/// Evaluates `f` on `inputs` (differentiable leaves). A non-scalar output is
/// reduced with fixed pseudo-random weights so every output element is covered.
fn evaluate<F>(f: &F, inputs: &[Tensor<f64>], seed: u64) -> Result<(Graph<f64>, Vec<Var>, Var)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let mut out = f(&mut g, &vars)?;
    let n = g.value(out).len();
    if n != 1 {
        let mut r = rng::stream(seed, 0xC4EC);
        let w = rng::uniform_tensor::<f64, _>(&mut r, &[n], -1.0, 1.0);
        out = g.dot(out, w.data())?;
    }
    Ok((g, vars, out))
}

/// Compares reverse-mode gradients of `f` against central differences.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let (mut g, vars, out) = evaluate(&f, inputs, opts.seed)?;
    g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = inputs
        .iter()
        .zip(&vars)
        .map(|(t, &v)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut picker = rng::stream(opts.seed, 0x9C0);
    let mut probe = inputs.to_vec();
    let mut report = GradCheckReport { max_rel_error: 0.0, checked: 0, skipped_kinks: 0, analytic: Vec::new() };
    for (k, input) in inputs.iter().enumerate() {
        let coords: Vec<usize> = match opts.max_coords_per_input {
            Some(m) if m < input.len() => {
                let mut c = sample(&mut picker, input.len(), m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..input.len()).collect(),
        };
        for i in coords {
            let orig = input.data()[i];
            probe[k].data_mut()[i] = orig + opts.step;
            let (gp, _, op) = evaluate(&f, &probe, opts.seed)?;
            probe[k].data_mut()[i] = orig - opts.step;
            let (gm, _, om) = evaluate(&f, &probe, opts.seed)?;
            probe[k].data_mut()[i] = orig;
            if gp.relu_pattern() != gm.relu_pattern() {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (gp.value(op).item() - gm.value(om).item()) / (2.0 * opts.step);
            let a = analytic[k].data()[i];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(GmmtError::numeric(format!("non-finite gradient probe at input {k}[{i}]")));
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.checked += 1;
        }
    }
    report.analytic = analytic;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_map_is_exact() {
        let x = Tensor::from_vec(vec![1, 4], vec![0.3, -1.2, 2.0, 0.7]).unwrap();
        let w = Tensor::from_vec(vec![3, 4], (0..12).map(|i| f64::from(i) * 0.1 - 0.5).collect()).unwrap();
        let b = Tensor::from_vec(vec![3], vec![0.1, 0.2, 0.3]).unwrap();
        let r = grad_check(|g, v| g.linear(v[0], v[1], v[2]), &[x, w, b], &GradCheckOptions::default()).unwrap();
        assert!(r.max_rel_error < 1e-9, "{}", r.max_rel_error);
        assert_eq!(r.skipped_kinks, 0);
    }

    #[test]
    fn constant_function_has_exactly_zero_gradient() {
        let x = Tensor::from_vec(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let r = grad_check(
            |g, _| Ok(g.constant(Tensor::scalar(4.0))),
            &[x],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.analytic[0].data().iter().all(|&v| v == 0.0));
        assert_eq!(r.max_rel_error, 0.0);
    }
}
