//! Noise schedule, closed-form forward diffusion, posterior parameters and
//! the DDIM reverse step.
//!
//! Timesteps are 1-based: `t` in `1..=T`, with `alpha_bar(0) == 1` standing
//! for the clean sample. Schedule coefficients are kept in `f64` regardless
//! of the tensor scalar type.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GmmtError, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_TIMESTEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    /// `alpha_bar[t]` for `t` in `0..=T`; `alpha_bar[0] == 1`.
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear beta from `beta_start` to `beta_end` over `timesteps` steps.
    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if timesteps == 0 {
            return Err(GmmtError::config("schedule needs at least one timestep"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(GmmtError::config(format!(
                "beta range must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let beta: Vec<f64> = (0..timesteps)
            .map(|i| {
                if timesteps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (timesteps - 1) as f64
                }
            })
            .collect();
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(timesteps + 1);
        alpha_bar.push(1.0);
        for a in &alpha {
            let prev = *alpha_bar.last().unwrap();
            alpha_bar.push(prev * a);
        }
        Ok(NoiseSchedule { beta, alpha, alpha_bar })
    }

    pub fn default_linear() -> Self {
        Self::linear(DEFAULT_TIMESTEPS, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("default schedule is valid")
    }

    /// Total number of diffusion steps `T`.
    pub fn timesteps(&self) -> usize {
        self.beta.len()
    }

    /// `beta_t`, `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// `alpha_bar_t`, `t` in `0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    fn check_t(&self, t: usize, allow_zero: bool) -> Result<()> {
        let lo = if allow_zero { 0 } else { 1 };
        if t < lo || t > self.timesteps() {
            return Err(GmmtError::config(format!("timestep {t} outside [{lo}, {}]", self.timesteps())));
        }
        Ok(())
    }
}

/// Closed-form `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) noise`.
pub fn forward_diffuse<T: Scalar>(x0: &Tensor<T>, t: usize, noise: &Tensor<T>, sched: &NoiseSchedule) -> Result<Tensor<T>> {
    sched.check_t(t, false)?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (T::lit(ab.sqrt()), T::lit((1.0 - ab).sqrt()));
    x0.zip_map(noise, |x, z| a * x + b * z)
}

/// Mean and variance of `x_{t-1}` given `x_t` and a noise prediction, as the
/// literal posterior formula. At `t = 1` the variance is exactly zero.
pub fn posterior_params<T: Scalar>(
    x_t: &Tensor<T>,
    eps_pred: &Tensor<T>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<(Tensor<T>, f64)> {
    sched.check_t(t, false)?;
    let (ab_t, ab_prev) = (sched.alpha_bar(t), sched.alpha_bar(t - 1));
    let (alpha, beta) = (sched.alpha(t), sched.beta(t));
    let sigma = (1.0 - ab_prev) / (1.0 - ab_t) * beta;
    let c_xt = alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab_t);
    let c_x0 = ab_prev.sqrt() * beta / (1.0 - ab_t) / ab_t.sqrt();
    let c_eps = (1.0 - ab_t).sqrt();
    let (c_xt, c_x0, c_eps) = (T::lit(c_xt), T::lit(c_x0), T::lit(c_eps));
    let mu = x_t.zip_map(eps_pred, |x, e| c_xt * x + c_x0 * (x - c_eps * e))?;
    Ok((mu, sigma))
}

/// `x0_hat = (x_t - sqrt(1 - abar_t) eps) / sqrt(abar_t)`.
pub fn predict_x0<T: Scalar>(x_t: &Tensor<T>, eps_pred: &Tensor<T>, t: usize, sched: &NoiseSchedule) -> Result<Tensor<T>> {
    sched.check_t(t, false)?;
    let ab = sched.alpha_bar(t);
    let (c_eps, inv) = (T::lit((1.0 - ab).sqrt()), T::lit(1.0 / ab.sqrt()));
    x_t.zip_map(eps_pred, |x, e| (x - c_eps * e) * inv)
}

/// One DDIM update from `t` to `t_prev` (`t_prev` may be 0).
///
/// `eta = 0` is deterministic and draws nothing from `rng`.
pub fn ddim_step<T: Scalar, R: Rng + ?Sized>(
    x_t: &Tensor<T>,
    eps_pred: &Tensor<T>,
    t: usize,
    t_prev: usize,
    eta: f64,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor<T>> {
    sched.check_t(t, false)?;
    if t_prev >= t {
        return Err(GmmtError::config(format!("ddim_step needs t_prev < t, got {t_prev} >= {t}")));
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(GmmtError::config(format!("eta must lie in [0, 1], got {eta}")));
    }
    let (ab_t, ab_prev) = (sched.alpha_bar(t), sched.alpha_bar(t_prev));
    let sigma = eta * ((1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - ab_t / ab_prev)).sqrt();
    let x0 = predict_x0(x_t, eps_pred, t, sched)?;
    let c_x0 = T::lit(ab_prev.sqrt());
    let c_eps = T::lit((1.0 - ab_prev - sigma * sigma).max(0.0).sqrt());
    let mut out = x0.zip_map(eps_pred, |x, e| c_x0 * x + c_eps * e)?;
    if sigma > 0.0 {
        let s = T::lit(sigma);
        for v in out.data_mut() {
            *v += s * rng::normal::<T, _>(rng);
        }
    }
    Ok(out)
}

/// Decreasing timesteps visited by the sampler; the final update always
/// lands on `t = 0`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepPlan {
    timesteps: Vec<usize>,
}

impl StepPlan {
    /// `steps` evenly spaced timesteps from `T` down to 1 (just `[T]` when `steps == 1`).
    pub fn new(timesteps: usize, steps: usize) -> Result<Self> {
        if steps == 0 || steps > timesteps {
            return Err(GmmtError::config(format!("step count {steps} outside [1, {timesteps}]")));
        }
        if steps == 1 {
            return Ok(StepPlan { timesteps: vec![timesteps] });
        }
        let span = (timesteps - 1) as u64;
        let div = (steps - 1) as u64;
        let ts = (0..steps as u64)
            .map(|i| timesteps - ((2 * i * span + div) / (2 * div)) as usize)
            .collect();
        Ok(StepPlan { timesteps: ts })
    }

    pub fn steps(&self) -> usize {
        self.timesteps.len()
    }

    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    /// `(t, t_prev)` pairs in sampling order, ending with `(last, 0)`.
    pub fn transitions(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.timesteps
            .iter()
            .enumerate()
            .map(|(i, &t)| (t, self.timesteps.get(i + 1).copied().unwrap_or(0)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn scalar(v: f64) -> Tensor<f64> {
        Tensor::scalar(v)
    }

    #[test]
    fn constant_beta_products() {
        let s = NoiseSchedule::linear(2, 0.1, 0.1).unwrap();
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(2) - 0.81).abs() < 1e-15);
        let one = NoiseSchedule::linear(1, 0.3, 0.5).unwrap();
        assert!((one.alpha_bar(1) - 0.7).abs() < 1e-15);
    }

    #[test]
    fn default_schedule_ends_near_pure_noise() {
        let s = NoiseSchedule::default_linear();
        assert_eq!(s.timesteps(), 1000);
        assert!(s.alpha_bar(1000) < 0.01);
        assert!((s.beta(1) - 1e-4).abs() < 1e-18 && (s.beta(1000) - 0.02).abs() < 1e-15);
    }

    #[test]
    fn rejects_invalid_ranges() {
        assert!(NoiseSchedule::linear(0, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.3, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn forward_diffuse_examples() {
        let s = NoiseSchedule::linear(2, 0.1, 0.1).unwrap();
        let x = forward_diffuse(&scalar(1.0), 2, &scalar(0.0), &s).unwrap();
        assert!((x.item() - 0.9).abs() < 1e-12);
        let x = forward_diffuse(&scalar(1.0), 2, &scalar(1.0), &s).unwrap();
        assert!((x.item() - (0.9 + 0.19f64.sqrt())).abs() < 1e-12);
        assert!((x.item() - 1.33589).abs() < 1e-5);
        assert!(forward_diffuse(&scalar(1.0), 3, &scalar(0.0), &s).is_err());
        assert!(forward_diffuse(&scalar(1.0), 0, &scalar(0.0), &s).is_err());
    }

    #[test]
    fn terminal_step_is_mostly_noise() {
        let s = NoiseSchedule::default_linear();
        let x = forward_diffuse(&scalar(1.0), 1000, &scalar(0.3), &s).unwrap();
        assert!((x.item() - 0.3).abs() < 0.01);
    }

    #[test]
    fn posterior_examples() {
        let s = NoiseSchedule::linear(2, 0.1, 0.1).unwrap();
        let (_, sigma0) = posterior_params(&scalar(0.4), &scalar(0.2), 1, &s).unwrap();
        assert_eq!(sigma0, 0.0);
        let (mu, sigma1) = posterior_params(&scalar(0.9), &scalar(0.0), 2, &s).unwrap();
        assert!((sigma1 - 0.1 / 0.19 * 0.1).abs() < 1e-15);
        assert!((sigma1 - 0.052632).abs() < 1e-6);
        assert!((mu.item() - 0.9f64.sqrt()).abs() < 1e-12);
        assert!((mu.item() - 0.94868).abs() < 1e-5);
    }

    #[test]
    fn ddim_single_step_matches_hand_evaluation() {
        let s = NoiseSchedule::linear(4, 0.05, 0.2).unwrap();
        let (xt, eps, t) = (0.7, -0.3, 3);
        let (ab_t, ab_p) = (s.alpha_bar(t), s.alpha_bar(t - 1));
        let x0 = (xt - (1.0 - ab_t).sqrt() * eps) / ab_t.sqrt();
        let hand = ab_p.sqrt() * x0 + (1.0 - ab_p).sqrt() * eps;
        let out = ddim_step(&scalar(xt), &scalar(eps), t, t - 1, 0.0, &s, &mut stream(0, 0)).unwrap();
        assert!((out.item() - hand).abs() < 1e-14);
    }

    #[test]
    fn ddim_eta_zero_is_deterministic_and_inverts_one_step() {
        let s = NoiseSchedule::default_linear();
        let x0 = Tensor::<f64>::from_vec(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let z = Tensor::from_vec(vec![3], vec![0.1, 1.3, -0.7]).unwrap();
        let xt = forward_diffuse(&x0, 600, &z, &s).unwrap();
        let a = ddim_step(&xt, &z, 600, 0, 0.0, &s, &mut stream(1, 0)).unwrap();
        let b = ddim_step(&xt, &z, 600, 0, 0.0, &s, &mut stream(2, 0)).unwrap();
        assert_eq!(a, b);
        for (r, e) in a.data().iter().zip(x0.data()) {
            assert!((r - *e).abs() < 1e-10);
        }
    }

    #[test]
    fn ddim_rejects_bad_order() {
        let s = NoiseSchedule::default_linear();
        assert!(ddim_step(&scalar(0.0), &scalar(0.0), 5, 5, 0.0, &s, &mut stream(0, 0)).is_err());
    }

    #[test]
    fn plans() {
        assert_eq!(StepPlan::new(1000, 1).unwrap().timesteps(), &[1000]);
        assert_eq!(StepPlan::new(4, 4).unwrap().timesteps(), &[4, 3, 2, 1]);
        let p = StepPlan::new(1000, 10).unwrap();
        assert_eq!(p.timesteps(), &[1000, 889, 778, 667, 556, 445, 334, 223, 112, 1]);
        assert_eq!(p.transitions().last(), Some((1, 0)));
        assert!(StepPlan::new(10, 0).is_err());
        assert!(StepPlan::new(10, 11).is_err());
    }
}
