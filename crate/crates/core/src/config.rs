//! Run configuration, read from and written to TOML.
//!
//! ```toml
//! seed = 7
//! out_dir = "out"
//!
//! [schedule]
//! timesteps = 1000
//! beta_start = 0.0001
//! beta_end = 0.02
//! eta = 0.0
//! sampler_steps = 1
//!
//! [denoiser]
//! blocks = 2
//! base_channels = 16
//! time_embed_dim = 8
//!
//! [head]
//! hidden_channels = 16
//!
//! [discriminator]
//! base_channels = 8
//!
//! [scenario]   # geometry, world seed, noise levels, eval_scenarios
//! [trainer]    # mode, lambda, epochs, steps_per_epoch, batch_size, lr_*, momentum, weight_decay
//! [metrics]    # pr_threshold, npr_threshold
//! ```
//!
//! Every key is optional; missing keys take the defaults shown by
//! [`RunConfig::default`].

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffusion::{NoiseSchedule, StepPlan, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_TIMESTEPS};
use crate::error::{GmmtError, Result};
use crate::fusion::{HeadConfig, Method, PipelineSpec, ScenarioConfig, World};
use crate::metrics::MetricsConfig;
use crate::nets::{DenoiserConfig, DiscriminatorConfig};
use crate::trainers::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// DDIM stochasticity; 0 is deterministic.
    pub eta: f64,
    /// Reverse steps `s` used at inference.
    pub sampler_steps: usize,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection {
            timesteps: DEFAULT_TIMESTEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
            eta: 0.0,
            sampler_steps: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserSection {
    pub blocks: usize,
    pub base_channels: usize,
    pub time_embed_dim: usize,
}

impl Default for DenoiserSection {
    fn default() -> Self {
        DenoiserSection { blocks: 2, base_channels: 16, time_embed_dim: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorSection {
    pub base_channels: usize,
}

impl Default for DiscriminatorSection {
    fn default() -> Self {
        DiscriminatorSection { base_channels: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub schedule: ScheduleSection,
    pub denoiser: DenoiserSection,
    pub head: HeadConfig,
    pub discriminator: DiscriminatorSection,
    pub scenario: ScenarioConfig,
    pub trainer: TrainConfig,
    pub metrics: MetricsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("out"),
            schedule: ScheduleSection::default(),
            denoiser: DenoiserSection::default(),
            head: HeadConfig::default(),
            discriminator: DiscriminatorSection::default(),
            scenario: ScenarioConfig::default(),
            trainer: TrainConfig::default(),
            metrics: MetricsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| GmmtError::config(format!("malformed config: {e}")))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| GmmtError::config(format!("cannot serialise config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GmmtError::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn denoiser_config(&self) -> DenoiserConfig {
        DenoiserConfig {
            blocks: self.denoiser.blocks,
            base_channels: self.denoiser.base_channels,
            feature_channels: self.scenario.channels,
            height: self.scenario.height,
            width: self.scenario.width,
            time_embed_dim: self.denoiser.time_embed_dim,
            max_timestep: self.schedule.timesteps,
        }
    }

    pub fn discriminator_config(&self) -> DiscriminatorConfig {
        DiscriminatorConfig {
            feature_channels: self.scenario.channels,
            height: self.scenario.height,
            width: self.scenario.width,
            base_channels: self.discriminator.base_channels,
        }
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        let s = &self.schedule;
        NoiseSchedule::linear(s.timesteps, s.beta_start, s.beta_end)
    }

    pub fn step_plan(&self) -> Result<StepPlan> {
        StepPlan::new(self.schedule.timesteps, self.schedule.sampler_steps)
    }

    pub fn pipeline_spec(&self, method: Method) -> Result<PipelineSpec> {
        Ok(PipelineSpec {
            method,
            denoiser: self.denoiser_config(),
            head: self.head.clone(),
            discriminator: (method == Method::Cgan).then(|| self.discriminator_config()),
            schedule: self.noise_schedule()?,
            eta: self.schedule.eta,
        })
    }

    pub fn world(&self) -> Result<World> {
        World::new(self.scenario.clone())
    }

    /// Checks every section and their mutual consistency.
    pub fn validate(&self) -> Result<()> {
        self.noise_schedule()?;
        self.step_plan()?;
        if !(0.0..=1.0).contains(&self.schedule.eta) {
            return Err(GmmtError::config(format!("eta must lie in [0, 1], got {}", self.schedule.eta)));
        }
        self.denoiser_config().validate()?;
        self.scenario.validate()?;
        self.trainer.validate()?;
        if self.trainer.mode == Method::Cgan {
            self.discriminator_config().validate()?;
        }
        if self.metrics.pr_threshold < 0.0 || self.metrics.npr_threshold < 0.0 {
            return Err(GmmtError::config("metric thresholds must be non-negative"));
        }
        Ok(())
    }
}
