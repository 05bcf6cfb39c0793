//! End-to-end prediction: fuse the modality features (typical block or
//! generative model), then run the tracking head.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::head::{HeadConfig, Prediction, TrackHead, TypicalFuse};
use super::scenario::Scenario;
use crate::diffusion::{ddim_step, NoiseSchedule, StepPlan};
use crate::error::{GmmtError, Result};
use crate::nets::{Denoiser, DenoiserConfig, Discriminator, DiscriminatorConfig};
use crate::rng::{self, streams};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which fusion route feeds the head, and how the generator is trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Typical concatenate-and-convolve fusion block.
    Base,
    /// Generator regressed directly onto the oracle fusion.
    Raw,
    /// Generator trained adversarially.
    Cgan,
    /// Conditional denoising diffusion.
    Dm,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Base, Method::Raw, Method::Cgan, Method::Dm];

    pub fn label(self) -> &'static str {
        match self {
            Method::Base => "BASE",
            Method::Raw => "RAW",
            Method::Cgan => "CGAN",
            Method::Dm => "DM",
        }
    }

    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        Self::ALL.get(usize::from(tag)).copied().ok_or_else(|| GmmtError::data(format!("unknown method tag {tag}")))
    }

    pub fn is_generative(self) -> bool {
        self != Method::Base
    }
}

impl std::str::FromStr for Method {
    type Err = GmmtError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "base" => Ok(Method::Base),
            "raw" => Ok(Method::Raw),
            "cgan" => Ok(Method::Cgan),
            "dm" => Ok(Method::Dm),
            _ => Err(GmmtError::config(format!("unknown mode '{s}' (expected base, raw, cgan or dm)"))),
        }
    }
}

/// Everything needed to build a [`Pipeline`].
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineSpec {
    pub method: Method,
    pub denoiser: DenoiserConfig,
    pub head: HeadConfig,
    /// Required for [`Method::Cgan`], ignored otherwise.
    pub discriminator: Option<DiscriminatorConfig>,
    pub schedule: NoiseSchedule,
    pub eta: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pipeline<T> {
    pub method: Method,
    /// Denoiser in DM mode, generator in RAW/CGAN mode.
    pub generator: Denoiser<T>,
    pub typical: TypicalFuse<T>,
    pub head: TrackHead<T>,
    pub discriminator: Option<Discriminator<T>>,
    pub schedule: NoiseSchedule,
    pub eta: f64,
}

/// Output of [`Pipeline::gmmt_infer`].
#[derive(Clone, Debug, PartialEq)]
pub struct Inference<T> {
    pub fused: Tensor<T>,
    pub model_calls: usize,
}

impl<T: Scalar> Pipeline<T> {
    pub fn new(spec: &PipelineSpec, seed: u64) -> Result<Self> {
        let c = spec.denoiser.feature_channels;
        if spec.schedule.timesteps() != spec.denoiser.max_timestep {
            return Err(GmmtError::config("denoiser max_timestep must equal the schedule length"));
        }
        let discriminator = match (spec.method, &spec.discriminator) {
            (Method::Cgan, Some(d)) => {
                if (d.feature_channels, d.height, d.width) != (c, spec.denoiser.height, spec.denoiser.width) {
                    return Err(GmmtError::config("discriminator geometry must match the denoiser"));
                }
                Some(Discriminator::new(d.clone(), &mut rng::stream(seed, streams::INIT_DISCRIMINATOR))?)
            }
            (Method::Cgan, None) => return Err(GmmtError::config("CGAN mode needs a discriminator config")),
            _ => None,
        };
        Ok(Pipeline {
            method: spec.method,
            generator: Denoiser::new(spec.denoiser.clone(), &mut rng::stream(seed, streams::INIT_DENOISER))?,
            typical: TypicalFuse::new(c, &mut rng::stream(seed, streams::INIT_TYPICAL)),
            head: TrackHead::new(spec.head.clone(), c, &mut rng::stream(seed, streams::INIT_HEAD))?,
            discriminator,
            schedule: spec.schedule.clone(),
            eta: spec.eta,
        })
    }

    pub fn feature_shape(&self) -> [usize; 3] {
        let c = &self.generator.config;
        [c.feature_channels, c.height, c.width]
    }

    /// Generative fusion of a batch `[N,C,H,W]`. DM mode starts from standard
    /// normal noise and follows `plan` with DDIM; RAW/CGAN mode is one
    /// generator pass on noise with timestep flag 0.
    pub fn gmmt_infer<R: rand::Rng + ?Sized>(
        &self,
        f_rgb: &Tensor<T>,
        f_tir: &Tensor<T>,
        plan: &StepPlan,
        rng: &mut R,
    ) -> Result<Inference<T>> {
        if !self.method.is_generative() {
            return Err(GmmtError::config("gmmt_infer called on the typical-fusion route"));
        }
        if !self.generator.is_finite() {
            return Err(GmmtError::numeric("generator parameters are not finite"));
        }
        let n = f_rgb.batch_len();
        let mut z: Tensor<T> = rng::normal_tensor(rng, f_rgb.shape());
        let mut calls = 0;
        if self.method == Method::Dm {
            for (t, t_prev) in plan.transitions() {
                let eps = self.generator.predict(&z, f_rgb, f_tir, &vec![t; n])?;
                calls += 1;
                z = ddim_step(&z, &eps, t, t_prev, self.eta, &self.schedule, rng)?;
            }
        } else {
            z = self.generator.predict(&z, f_rgb, f_tir, &vec![0; n])?;
            calls = 1;
        }
        if !z.all_finite() {
            return Err(GmmtError::numeric("inference produced non-finite features"));
        }
        Ok(Inference { fused: z, model_calls: calls })
    }

    /// Fused features for a batch via the configured route.
    pub fn fuse<R: rand::Rng + ?Sized>(
        &self,
        f_rgb: &Tensor<T>,
        f_tir: &Tensor<T>,
        plan: &StepPlan,
        rng: &mut R,
    ) -> Result<Tensor<T>> {
        match self.method {
            Method::Base => self.typical.fuse(f_rgb, f_tir),
            _ => Ok(self.gmmt_infer(f_rgb, f_tir, plan, rng)?.fused),
        }
    }

    /// Prediction for one scenario, plus the fused map the head saw.
    pub fn predict<R: rand::Rng + ?Sized>(
        &self,
        scenario: &Scenario<T>,
        plan: &StepPlan,
        rng: &mut R,
    ) -> Result<(Prediction<T>, Tensor<T>)> {
        let [c, h, w] = self.feature_shape();
        let batch = |t: &Tensor<T>| t.clone().reshape(&[1, c, h, w]);
        let fused = self.fuse(&batch(&scenario.f_rgb)?, &batch(&scenario.f_tir)?, plan, rng)?;
        let pred = self.head.predict(&fused)?.remove(0);
        Ok((pred, fused.reshape(&[c, h, w])?))
    }

    /// Predictions for many scenarios in parallel. Scenario `i` draws its
    /// noise from its own stream, so results do not depend on scheduling.
    pub fn predict_all(
        &self,
        scenarios: &[Scenario<T>],
        plan: &StepPlan,
        seed: u64,
    ) -> Result<Vec<(Prediction<T>, Tensor<T>)>> {
        scenarios
            .par_iter()
            .enumerate()
            .map(|(i, s)| self.predict(s, plan, &mut rng::item_stream(seed, streams::INFER_NOISE, i as u64)))
            .collect()
    }
}
