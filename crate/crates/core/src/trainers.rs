//! Training procedures for the four fusion routes.
//!
//! Every step minimises `loss_track + lambda * loss_gen`, where `loss_track`
//! is the tracking-head loss on the fused features the step produces and
//! `loss_gen` depends on the route:
//!
//! * BASE: `mse(typical(f_rgb, f_tir), fused)`
//! * RAW: `mse(G(z, f_rgb, f_tir, 0), fused)` with `z` standard normal
//! * DM: `mse(eps, U(x_t, f_rgb, f_tir, t))` with `x_t` the forward-diffused
//!   oracle; the head sees the one-step estimate of `x_0`, whose gradient
//!   reaches `U` scaled by `sqrt(ab_t)` so that large-`t` samples do not
//!   swamp the update
//! * CGAN: least-squares adversarial loss, alternating one discriminator and
//!   one generator update per batch
//!
//! Optimisation is SGD with momentum and weight decay.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GmmtError, Result};
use crate::fusion::{scenario_at, Challenge, Method, Pipeline, Scenario, World};
use crate::metrics::BBox;
use crate::rng::{self, streams};
use crate::scalar::Scalar;
use crate::tensor::{sgd_step, Bound, Graph, ParamSet, SgdConfig, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Method,
    pub lambda: f64,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    /// Learning rate at epoch 1.
    pub lr_start: f64,
    /// Learning rate at the end of warmup.
    pub lr_peak: f64,
    pub warmup_epochs: usize,
    /// Learning rate at the last epoch.
    pub lr_final: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Method::Dm,
            lambda: 1.0,
            epochs: 100,
            steps_per_epoch: 50,
            batch_size: 4,
            lr_start: 0.001,
            lr_peak: 0.005,
            warmup_epochs: 20,
            lr_final: 0.00005,
            momentum: 0.9,
            weight_decay: 0.0001,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(GmmtError::config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if self.batch_size == 0 || (self.mode == Method::Cgan && self.batch_size < 2) {
            return Err(GmmtError::config(format!(
                "batch_size {} too small for {} mode (CGAN needs >= 2 for batch statistics)",
                self.batch_size,
                self.mode.label()
            )));
        }
        if self.warmup_epochs == 0 || self.warmup_epochs > self.epochs.max(1) {
            return Err(GmmtError::config("warmup_epochs must lie in [1, epochs]"));
        }
        if [self.lr_start, self.lr_peak, self.lr_final].iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(GmmtError::config("learning rates must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(GmmtError::config("momentum must lie in [0, 1) and weight_decay be >= 0"));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }
}

/// Learning rate for 1-based `epoch`: linear warmup from `lr_start` to
/// `lr_peak` over `warmup_epochs`, then log-linear decay reaching `lr_final`
/// at the last epoch.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch == 0 || epoch > cfg.epochs {
        return Err(GmmtError::config(format!("epoch {epoch} outside [1, {}]", cfg.epochs)));
    }
    let w = cfg.warmup_epochs;
    if epoch <= w {
        if w == 1 {
            return Ok(cfg.lr_peak);
        }
        let f = (epoch - 1) as f64 / (w - 1) as f64;
        return Ok(cfg.lr_start + f * (cfg.lr_peak - cfg.lr_start));
    }
    let f = (epoch - w) as f64 / (cfg.epochs - w) as f64;
    Ok(cfg.lr_peak * (cfg.lr_final / cfg.lr_peak).powf(f))
}

/// `loss_track + lambda * loss_gen`.
pub fn combined_loss(loss_track: f64, loss_gen: f64, lambda: f64) -> f64 {
    loss_track + lambda * loss_gen
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub loss_track: f64,
    /// Generator-side loss (`Loss_G` in CGAN mode).
    pub loss_gen: f64,
    pub total: f64,
    pub loss_d0: Option<f64>,
    pub loss_d1: Option<f64>,
}

impl LossBreakdown {
    fn new(loss_track: f64, loss_gen: f64, lambda: f64) -> Result<Self> {
        let total = combined_loss(loss_track, loss_gen, lambda);
        if !total.is_finite() {
            return Err(GmmtError::numeric(format!("non-finite loss (track {loss_track}, gen {loss_gen})")));
        }
        Ok(LossBreakdown { loss_track, loss_gen, total, loss_d0: None, loss_d1: None })
    }
}

/// A stacked training batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    pub f_rgb: Tensor<T>,
    pub f_tir: Tensor<T>,
    pub fused: Tensor<T>,
    pub boxes: Vec<BBox>,
}

impl<T: Scalar> Batch<T> {
    pub fn from_scenarios(items: &[Scenario<T>]) -> Result<Self> {
        let stack = |f: fn(&Scenario<T>) -> &Tensor<T>| Tensor::stack(&items.iter().map(f).collect::<Vec<_>>());
        Ok(Batch {
            f_rgb: stack(|s| &s.f_rgb)?,
            f_tir: stack(|s| &s.f_tir)?,
            fused: stack(|s| &s.fused_oracle)?,
            boxes: items.iter().map(|s| s.bbox).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

fn scalar_of<T: Scalar>(g: &Graph<T>, v: Var) -> f64 {
    g.value(v).item().to_f64_lossy()
}

/// Moves graph gradients into the given parameter sets and steps all of them,
/// or none if any gradient is non-finite.
fn update<T: Scalar>(g: &Graph<T>, sets: &mut [(&mut ParamSet<T>, &Bound)], sgd: &SgdConfig) -> Result<()> {
    g.check_finite()?;
    for (ps, b) in sets.iter_mut() {
        ps.accumulate_grads(g, b);
    }
    for (ps, _) in sets.iter() {
        for (name, p) in ps.iter() {
            if !p.grad.all_finite() {
                return Err(GmmtError::numeric(format!("non-finite gradient in '{name}'")));
            }
        }
    }
    for (ps, _) in sets.iter_mut() {
        sgd_step(ps, sgd)?;
    }
    Ok(())
}

fn clear_grads<T: Scalar>(pipe: &mut Pipeline<T>) {
    pipe.generator.params.zero_grads();
    pipe.head.params.zero_grads();
    pipe.typical.params.zero_grads();
    if let Some(d) = pipe.discriminator.as_mut() {
        d.params.zero_grads();
    }
}

fn expect_method<T>(pipe: &Pipeline<T>, m: Method) -> Result<()> {
    if pipe.method != m {
        return Err(GmmtError::config(format!("{} step on a {} pipeline", m.label(), pipe.method.label())));
    }
    Ok(())
}

/// Generator pass on standard-normal noise with timestep flag 0.
fn generate<T: Scalar, R: Rng + ?Sized>(
    pipe: &Pipeline<T>,
    g: &mut Graph<T>,
    pg: &Bound,
    batch: &Batch<T>,
    rng: &mut R,
) -> Result<Var> {
    let z = g.constant(rng::normal_tensor(rng, batch.fused.shape()));
    let (a, b) = (g.constant(batch.f_rgb.clone()), g.constant(batch.f_tir.clone()));
    pipe.generator.forward(g, pg, z, a, b, &vec![0; batch.len()])
}

/// BASE: typical fusion block and head.
pub fn step_base<T: Scalar>(pipe: &mut Pipeline<T>, batch: &Batch<T>, lambda: f64, sgd: &SgdConfig) -> Result<LossBreakdown> {
    expect_method(pipe, Method::Base)?;
    let mut g = Graph::new();
    let pt = pipe.typical.bind(&mut g);
    let ph = pipe.head.bind(&mut g);
    let (a, b) = (g.constant(batch.f_rgb.clone()), g.constant(batch.f_tir.clone()));
    let fused = pipe.typical.forward(&mut g, &pt, a, b)?;
    let target = g.constant(batch.fused.clone());
    let lg = g.mse(fused, target)?;
    let out = pipe.head.forward(&mut g, &ph, fused)?;
    let lt = pipe.head.loss(&mut g, out, &batch.boxes)?;
    let losses = LossBreakdown::new(scalar_of(&g, lt), scalar_of(&g, lg), lambda)?;
    let scaled = g.scale(lg, T::lit(lambda));
    let total = g.add(lt, scaled)?;
    g.backward(total)?;
    update(&g, &mut [(&mut pipe.typical.params, &pt), (&mut pipe.head.params, &ph)], sgd)?;
    Ok(losses)
}

/// RAW: generator regressed onto the oracle fusion.
pub fn step_raw<T: Scalar, R: Rng + ?Sized>(
    pipe: &mut Pipeline<T>,
    batch: &Batch<T>,
    lambda: f64,
    sgd: &SgdConfig,
    rng: &mut R,
) -> Result<LossBreakdown> {
    expect_method(pipe, Method::Raw)?;
    let mut g = Graph::new();
    let pg = pipe.generator.bind(&mut g);
    let ph = pipe.head.bind(&mut g);
    let fused = generate(pipe, &mut g, &pg, batch, rng)?;
    let target = g.constant(batch.fused.clone());
    let lg = g.mse(fused, target)?;
    let out = pipe.head.forward(&mut g, &ph, fused)?;
    let lt = pipe.head.loss(&mut g, out, &batch.boxes)?;
    let losses = LossBreakdown::new(scalar_of(&g, lt), scalar_of(&g, lg), lambda)?;
    let scaled = g.scale(lg, T::lit(lambda));
    let total = g.add(lt, scaled)?;
    g.backward(total)?;
    update(&g, &mut [(&mut pipe.generator.params, &pg), (&mut pipe.head.params, &ph)], sgd)?;
    Ok(losses)
}

/// DM step with explicit timesteps and noise.
pub fn step_dm_with<T: Scalar>(
    pipe: &mut Pipeline<T>,
    batch: &Batch<T>,
    ts: &[usize],
    noise: &Tensor<T>,
    lambda: f64,
    sgd: &SgdConfig,
) -> Result<LossBreakdown> {
    expect_method(pipe, Method::Dm)?;
    let n = batch.len();
    if ts.len() != n {
        return Err(GmmtError::shape(format!("{} timesteps for batch of {n}", ts.len())));
    }
    batch.fused.expect_same_shape(noise, "diffusion noise")?;
    let sched = &pipe.schedule;
    for &t in ts {
        if t == 0 || t > sched.timesteps() {
            return Err(GmmtError::config(format!("training timestep {t} outside [1, {}]", sched.timesteps())));
        }
    }
    let per = batch.fused.len() / n;
    let ab: Vec<f64> = ts.iter().map(|&t| sched.alpha_bar(t)).collect();
    let mut x_t = batch.fused.clone();
    for (i, chunk) in x_t.data_mut().chunks_mut(per).enumerate() {
        let (s, r) = (T::lit(ab[i].sqrt()), T::lit((1.0 - ab[i]).sqrt()));
        for (v, &e) in chunk.iter_mut().zip(&noise.data()[i * per..(i + 1) * per]) {
            *v = s * *v + r * e;
        }
    }
    let mut g = Graph::new();
    let pg = pipe.generator.bind(&mut g);
    let ph = pipe.head.bind(&mut g);
    let xv = g.constant(x_t.clone());
    let (a, b) = (g.constant(batch.f_rgb.clone()), g.constant(batch.f_tir.clone()));
    let eps = pipe.generator.forward(&mut g, &pg, xv, a, b, ts)?;
    let target = g.constant(noise.clone());
    let lg = g.mse(eps, target)?;

    // x0_hat = x_t / sqrt(ab) - sqrt((1 - ab) / ab) * eps, evaluated exactly,
    // with the gradient into eps damped by sqrt(ab) (Jacobian -sqrt(1 - ab)).
    let eps_val = g.value(eps).clone();
    let mut x0_val = x_t;
    for (i, chunk) in x0_val.data_mut().chunks_mut(per).enumerate() {
        let (inv, k) = (T::lit(1.0 / ab[i].sqrt()), T::lit(((1.0 - ab[i]) / ab[i]).sqrt()));
        for (v, &e) in chunk.iter_mut().zip(&eps_val.data()[i * per..(i + 1) * per]) {
            *v = *v * inv - k * e;
        }
    }
    let x0_const = g.constant(x0_val);
    let eps_const = g.constant(eps_val);
    let delta = g.sub(eps, eps_const)?;
    let damped: Vec<T> = ab.iter().map(|&v| T::lit(-(1.0 - v).sqrt())).collect();
    let delta = g.scale_batch(delta, &damped)?;
    let x0_hat = g.add(x0_const, delta)?;
    let out = pipe.head.forward(&mut g, &ph, x0_hat)?;
    let lt = pipe.head.loss(&mut g, out, &batch.boxes)?;

    let losses = LossBreakdown::new(scalar_of(&g, lt), scalar_of(&g, lg), lambda)?;
    let scaled = g.scale(lg, T::lit(lambda));
    let total = g.add(lt, scaled)?;
    g.backward(total)?;
    update(&g, &mut [(&mut pipe.generator.params, &pg), (&mut pipe.head.params, &ph)], sgd)?;
    Ok(losses)
}

/// DM: timesteps uniform on `[1, T]`, standard-normal noise.
pub fn step_dm<T: Scalar, R: Rng + ?Sized>(
    pipe: &mut Pipeline<T>,
    batch: &Batch<T>,
    lambda: f64,
    sgd: &SgdConfig,
    rng: &mut R,
) -> Result<LossBreakdown> {
    let big_t = pipe.schedule.timesteps();
    let ts: Vec<usize> = (0..batch.len()).map(|_| rng.random_range(1..=big_t)).collect();
    let noise = rng::normal_tensor(rng, batch.fused.shape());
    step_dm_with(pipe, batch, &ts, &noise, lambda, sgd)
}

fn zeros_like_scores<T: Scalar>(g: &mut Graph<T>, n: usize, v: f64) -> Var {
    g.constant(Tensor::full(&[n, 1], T::lit(v)))
}

/// Discriminator losses `(Loss_D0, Loss_D1)` on a batch, using batch statistics
/// and leaving all state untouched.
pub fn discriminator_losses<T: Scalar>(pipe: &Pipeline<T>, fake: &Tensor<T>, batch: &Batch<T>) -> Result<(f64, f64)> {
    let d = pipe.discriminator.as_ref().ok_or_else(|| GmmtError::config("pipeline has no discriminator"))?;
    let mut g = Graph::new();
    let pd = d.bind(&mut g);
    let (l0, l1, _) = d_losses(d, &mut g, &pd, fake, batch)?;
    Ok((scalar_of(&g, l0), scalar_of(&g, l1)))
}

fn d_losses<T: Scalar>(
    d: &crate::nets::Discriminator<T>,
    g: &mut Graph<T>,
    pd: &Bound,
    fake: &Tensor<T>,
    batch: &Batch<T>,
) -> Result<(Var, Var, Vec<crate::tensor::BatchStats<T>>)> {
    let n = batch.len();
    let (a, b) = (g.constant(batch.f_rgb.clone()), g.constant(batch.f_tir.clone()));
    let fake = g.constant(fake.clone());
    let real = g.constant(batch.fused.clone());
    let (p_fake, s0) = d.forward(g, pd, fake, a, b, true)?;
    let (p_real, s1) = d.forward(g, pd, real, a, b, true)?;
    let zero = zeros_like_scores(g, n, 0.0);
    let one = zeros_like_scores(g, n, 1.0);
    let l0 = g.mse(p_fake, zero)?;
    let l1 = g.mse(p_real, one)?;
    let mut stats = s0;
    stats.extend(s1);
    Ok((l0, l1, stats))
}

/// CGAN phase 1: one discriminator update on `fake` (labelled 0) and the
/// oracle fusion (labelled 1). Returns `(Loss_D0, Loss_D1)` before the update.
pub fn cgan_discriminator_step<T: Scalar>(
    pipe: &mut Pipeline<T>,
    fake: &Tensor<T>,
    batch: &Batch<T>,
    sgd: &SgdConfig,
) -> Result<(f64, f64)> {
    let d = pipe.discriminator.as_mut().ok_or_else(|| GmmtError::config("pipeline has no discriminator"))?;
    let mut g = Graph::new();
    let pd = d.bind(&mut g);
    let (l0, l1, stats) = d_losses(d, &mut g, &pd, fake, batch)?;
    let (v0, v1) = (scalar_of(&g, l0), scalar_of(&g, l1));
    if !(v0 + v1).is_finite() {
        return Err(GmmtError::numeric("non-finite discriminator loss"));
    }
    let loss = g.add(l0, l1)?;
    g.backward(loss)?;
    update(&g, &mut [(&mut d.params, &pd)], sgd)?;
    let (fake_stats, real_stats) = stats.split_at(stats.len() / 2);
    d.update_running(fake_stats);
    d.update_running(real_stats);
    Ok((v0, v1))
}

/// CGAN: discriminator step then generator step on the same batch.
/// The generator phase scores `fused*` with the updated, frozen discriminator.
pub fn step_cgan<T: Scalar, R: Rng + ?Sized>(
    pipe: &mut Pipeline<T>,
    batch: &Batch<T>,
    lambda: f64,
    sgd: &SgdConfig,
    rng: &mut R,
) -> Result<LossBreakdown> {
    expect_method(pipe, Method::Cgan)?;
    if batch.len() < 2 {
        return Err(GmmtError::config("CGAN steps need a batch of at least 2"));
    }
    let mut g = Graph::new();
    let pg = pipe.generator.bind(&mut g);
    let ph = pipe.head.bind(&mut g);
    let fused = generate(pipe, &mut g, &pg, batch, rng)?;
    let fake = g.value(fused).clone();

    let (d0, d1) = cgan_discriminator_step(pipe, &fake, batch, sgd)?;

    let d = pipe.discriminator.as_ref().expect("checked by the discriminator step");
    let pd = d.bind(&mut g);
    let (a, b) = (g.constant(batch.f_rgb.clone()), g.constant(batch.f_tir.clone()));
    let (p_fake, _) = d.forward(&mut g, &pd, fused, a, b, true)?;
    let one = zeros_like_scores(&mut g, batch.len(), 1.0);
    let lg = g.mse(p_fake, one)?;
    let out = pipe.head.forward(&mut g, &ph, fused)?;
    let lt = pipe.head.loss(&mut g, out, &batch.boxes)?;
    let mut losses = LossBreakdown::new(scalar_of(&g, lt), scalar_of(&g, lg), lambda)?;
    losses.loss_d0 = Some(d0);
    losses.loss_d1 = Some(d1);
    let scaled = g.scale(lg, T::lit(lambda));
    let total = g.add(lt, scaled)?;
    g.backward(total)?;
    update(&g, &mut [(&mut pipe.generator.params, &pg), (&mut pipe.head.params, &ph)], sgd)?;
    Ok(losses)
}

/// One step of whichever route `pipe` uses.
pub fn step<T: Scalar, R: Rng + ?Sized>(
    pipe: &mut Pipeline<T>,
    batch: &Batch<T>,
    lambda: f64,
    sgd: &SgdConfig,
    rng: &mut R,
) -> Result<LossBreakdown> {
    let r = match pipe.method {
        Method::Base => step_base(pipe, batch, lambda, sgd),
        Method::Raw => step_raw(pipe, batch, lambda, sgd, rng),
        Method::Cgan => step_cgan(pipe, batch, lambda, sgd, rng),
        Method::Dm => step_dm(pipe, batch, lambda, sgd, rng),
    };
    if r.is_err() {
        clear_grads(pipe);
    }
    r
}

/// Progress through a run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TrainState {
    /// Last completed epoch.
    pub epoch: usize,
    /// Completed optimiser steps.
    pub step: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    /// 1-based step index.
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub losses: LossBreakdown,
}

/// Training batch `step` (0-based): scenarios `step * B .. (step + 1) * B`
/// of the training stream, challenges cycling through all four.
pub fn training_batch<T: Scalar>(world: &World, seed: u64, step: usize, batch_size: usize) -> Result<Batch<T>> {
    let items: Vec<Scenario<T>> = (0..batch_size)
        .map(|b| {
            let idx = (step * batch_size + b) as u64;
            scenario_at(world, seed, streams::TRAIN_SCENARIOS, idx, Challenge::cycled(idx))
        })
        .collect();
    Batch::from_scenarios(&items)
}

/// Runs `cfg.epochs * cfg.steps_per_epoch` steps, reporting each to `on_step`.
/// On error the pipeline holds the parameters of the last successful step.
pub fn train<T: Scalar>(
    pipe: &mut Pipeline<T>,
    world: &World,
    cfg: &TrainConfig,
    seed: u64,
    state: &mut TrainState,
    mut on_step: impl FnMut(&LogRow) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    if cfg.mode != pipe.method {
        return Err(GmmtError::config(format!("train mode {} on a {} pipeline", cfg.mode.label(), pipe.method.label())));
    }
    let mut noise = rng::stream(seed, streams::TRAIN_NOISE);
    for epoch in 1..=cfg.epochs {
        let lr = lr_at(epoch, cfg)?;
        let sgd = SgdConfig { lr, momentum: cfg.momentum, weight_decay: cfg.weight_decay };
        for _ in 0..cfg.steps_per_epoch {
            let batch = training_batch(world, seed, state.step, cfg.batch_size)?;
            let losses = step(pipe, &batch, cfg.lambda, &sgd, &mut noise)?;
            state.step += 1;
            on_step(&LogRow { step: state.step, epoch, lr, losses })?;
        }
        state.epoch = epoch;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_endpoints() {
        let c = TrainConfig::default();
        assert_eq!(lr_at(1, &c).unwrap(), 0.001);
        assert!((lr_at(20, &c).unwrap() - 0.005).abs() < 1e-15);
        assert!((lr_at(100, &c).unwrap() - 0.00005).abs() < 1e-15);
        assert!(lr_at(0, &c).is_err());
        assert!(lr_at(101, &c).is_err());
    }

    #[test]
    fn combined_loss_arithmetic() {
        assert_eq!(combined_loss(1.0, 2.0, 3.0), 7.0);
        assert_eq!(combined_loss(0.25, 9.0, 0.0), 0.25);
        assert!((combined_loss(0.01, 0.5, 100.0) - 50.01).abs() < 1e-12);
    }

    #[test]
    fn cgan_needs_batch_of_two() {
        let c = TrainConfig { mode: Method::Cgan, batch_size: 1, ..Default::default() };
        assert!(c.validate().is_err());
    }
}
