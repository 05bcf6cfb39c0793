//! Synthetic two-modality world with a known correct fusion.
//!
//! Each scenario plants one target (a Gaussian bump with a fixed per-modality
//! channel signature) plus per-modality distractors and background noise.
//! Challenges degrade one modality's target or add heavy noise to both.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GmmtError, Result};
use crate::metrics::BBox;
use crate::rng::{self, streams};
use crate::scalar::Scalar;
use crate::tensor::{FeatureMap, Tensor};

const ORACLE_EPS: f64 = 1e-6;
/// Distractor peak relative to the target's.
const DISTRACTOR_AMPLITUDE: f64 = 0.7;
const DISTRACTOR_SIGMA: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Distractors planted per modality.
    pub distractors: usize,
    /// Peak amplitude of an undegraded target.
    pub amplitude: f64,
    pub background_std: f64,
    /// Extra noise added to both modalities under `BothNoisy`.
    pub noise_std: f64,
    /// Target amplitude kept in the degraded modality.
    pub degrade_gain: f64,
    /// Seed of the frozen world constants (channel signatures).
    pub world_seed: u64,
    /// Held-out scenarios used by `eval`, `ablate` and `sweep`.
    pub eval_scenarios: usize,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            channels: 16,
            height: 16,
            width: 16,
            distractors: 2,
            amplitude: 4.0,
            background_std: 0.2,
            noise_std: 1.2,
            degrade_gain: 0.2,
            world_seed: 0,
            eval_scenarios: 200,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.height < 2 || self.width < 2 {
            return Err(GmmtError::config(format!("scenario geometry too small: {}x{}x{}", self.channels, self.height, self.width)));
        }
        if !(0.0..=1.0).contains(&self.degrade_gain) || !(self.amplitude > 0.0) || self.background_std < 0.0 || self.noise_std < 0.0 {
            return Err(GmmtError::config("scenario gains and noise levels out of range"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Challenge {
    Clean,
    RgbDegraded,
    TirDegraded,
    BothNoisy,
}

impl Challenge {
    pub const ALL: [Challenge; 4] = [Challenge::Clean, Challenge::RgbDegraded, Challenge::TirDegraded, Challenge::BothNoisy];

    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            Challenge::Clean => "clean",
            Challenge::RgbDegraded => "rgb_degraded",
            Challenge::TirDegraded => "tir_degraded",
            Challenge::BothNoisy => "both_noisy",
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        Self::ALL.get(usize::from(tag)).copied().ok_or_else(|| GmmtError::data(format!("unknown challenge tag {tag}")))
    }

    /// Challenge of item `index` in a mixed stream.
    pub fn cycled(index: u64) -> Self {
        Self::ALL[(index % 4) as usize]
    }

    /// Target amplitude in `(rgb, tir)`.
    pub fn target_gains(self, degrade_gain: f64) -> (f64, f64) {
        match self {
            Challenge::RgbDegraded => (degrade_gain, 1.0),
            Challenge::TirDegraded => (1.0, degrade_gain),
            Challenge::Clean | Challenge::BothNoisy => (1.0, 1.0),
        }
    }
}

/// Frozen world constants: unit-RMS channel signatures of the target and of
/// the distractors in each modality.
#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub config: ScenarioConfig,
    pub target_rgb: Vec<f64>,
    pub target_tir: Vec<f64>,
    pub distractor_rgb: Vec<f64>,
    pub distractor_tir: Vec<f64>,
}

fn signature<R: Rng + ?Sized>(rng: &mut R, c: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..c).map(|_| rng::normal::<f64, _>(rng)).collect();
    let rms = (v.iter().map(|x| x * x).sum::<f64>() / c as f64).sqrt().max(1e-12);
    v.into_iter().map(|x| x / rms).collect()
}

impl World {
    pub fn new(config: ScenarioConfig) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(config.world_seed, streams::WORLD);
        let c = config.channels;
        Ok(World {
            target_rgb: signature(&mut r, c),
            target_tir: signature(&mut r, c),
            distractor_rgb: signature(&mut r, c),
            distractor_tir: signature(&mut r, c),
            config,
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.config.channels, self.config.height, self.config.width]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scenario<T> {
    pub f_rgb: FeatureMap<T>,
    pub f_tir: FeatureMap<T>,
    pub fused_oracle: FeatureMap<T>,
    pub bbox: BBox,
    pub challenge: Challenge,
}

/// Adds `amp * sig[c] * exp(-dx^2/2sx^2 - dy^2/2sy^2)` to a `[C,H,W]` buffer.
fn add_bump(buf: &mut [f64], h: usize, w: usize, sig: &[f64], amp: f64, (cx, cy): (f64, f64), (sx, sy): (f64, f64)) {
    let plane = h * w;
    for y in 0..h {
        for x in 0..w {
            let dx = (x as f64 - cx) / sx;
            let dy = (y as f64 - cy) / sy;
            let g = amp * (-0.5 * (dx * dx + dy * dy)).exp();
            for (c, s) in sig.iter().enumerate() {
                buf[c * plane + y * w + x] += s * g;
            }
        }
    }
}

/// Target-only component of each modality, `(rgb, tir)`, as `[C,H,W]` buffers.
pub fn target_components(world: &World, bbox: &BBox, challenge: Challenge) -> (Vec<f64>, Vec<f64>) {
    let cfg = &world.config;
    let n = cfg.channels * cfg.height * cfg.width;
    let spread = ((bbox.w / 4.0).max(0.5), (bbox.h / 4.0).max(0.5));
    let (g_rgb, g_tir) = challenge.target_gains(cfg.degrade_gain);
    let mut rgb = vec![0.0; n];
    let mut tir = vec![0.0; n];
    add_bump(&mut rgb, cfg.height, cfg.width, &world.target_rgb, cfg.amplitude * g_rgb, (bbox.cx, bbox.cy), spread);
    add_bump(&mut tir, cfg.height, cfg.width, &world.target_tir, cfg.amplitude * g_tir, (bbox.cx, bbox.cy), spread);
    (rgb, tir)
}

/// Draws one scenario. Box centres are grid cells; extents are integers in
/// `[2, max(2, W/3)]` (resp. `H`).
pub fn synth_scenario<T: Scalar, R: Rng + ?Sized>(world: &World, rng: &mut R, challenge: Challenge) -> Scenario<T> {
    let cfg = &world.config;
    let (h, w) = (cfg.height, cfg.width);
    let cx = rng.random_range(0..w) as f64;
    let cy = rng.random_range(0..h) as f64;
    let bw = rng.random_range(2..=(w / 3).max(2)) as f64;
    let bh = rng.random_range(2..=(h / 3).max(2)) as f64;
    let bbox = BBox::new(cx, cy, bw, bh);
    let (mut rgb, mut tir) = target_components(world, &bbox, challenge);
    for (buf, sig) in [(&mut rgb, &world.distractor_rgb), (&mut tir, &world.distractor_tir)] {
        for _ in 0..cfg.distractors {
            let at = (rng.random_range(0..w) as f64, rng.random_range(0..h) as f64);
            add_bump(buf, h, w, sig, cfg.amplitude * DISTRACTOR_AMPLITUDE, at, (DISTRACTOR_SIGMA, DISTRACTOR_SIGMA));
        }
    }
    for buf in [&mut rgb, &mut tir] {
        for v in buf.iter_mut() {
            *v += cfg.background_std * rng::normal::<f64, _>(rng);
        }
    }
    if challenge == Challenge::BothNoisy {
        for buf in [&mut rgb, &mut tir] {
            for v in buf.iter_mut() {
                *v += cfg.noise_std * rng::normal::<f64, _>(rng);
            }
        }
    }
    let shape = world.shape().to_vec();
    let f_rgb: Tensor<T> = Tensor::from_vec(shape.clone(), rgb.into_iter().map(T::lit).collect()).expect("world shape");
    let f_tir: Tensor<T> = Tensor::from_vec(shape, tir.into_iter().map(T::lit).collect()).expect("world shape");
    let fused_oracle = oracle_fuse(&f_rgb, &f_tir).expect("matching shapes");
    Scenario { f_rgb, f_tir, fused_oracle, bbox, challenge }
}

/// Scenario `index` of a seeded stream; each index has its own generator.
pub fn scenario_at<T: Scalar>(world: &World, seed: u64, stream: u64, index: u64, challenge: Challenge) -> Scenario<T> {
    synth_scenario(world, &mut rng::item_stream(seed, stream, index), challenge)
}

/// The first `count` held-out evaluation scenarios. Challenges cycle through
/// all four unless `only` pins one.
pub fn held_out<T: Scalar>(world: &World, seed: u64, count: usize, only: Option<Challenge>) -> Vec<Scenario<T>> {
    (0..count as u64)
        .map(|i| scenario_at(world, seed, streams::EVAL_SCENARIOS, i, only.unwrap_or(Challenge::cycled(i))))
        .collect()
}

/// Channel-summed energy over the edge-clipped 3x3 neighbourhood of each cell.
fn local_energy(data: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let plane = h * w;
    let mut point = vec![0.0; plane];
    for k in 0..c {
        for (p, v) in point.iter_mut().zip(&data[k * plane..(k + 1) * plane]) {
            *p += v * v;
        }
    }
    let mut out = vec![0.0; plane];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for yy in y.saturating_sub(1)..(y + 2).min(h) {
                for xx in x.saturating_sub(1)..(x + 2).min(w) {
                    s += point[yy * w + xx];
                }
            }
            out[y * w + x] = s;
        }
    }
    out
}

/// Reliability-gated convex mix: each cell takes `g * rgb + (1 - g) * tir`
/// with `g = E_rgb / (E_rgb + E_tir + 1e-6)` from local energies.
/// Accepts `[C,H,W]` maps or `[N,C,H,W]` batches.
pub fn oracle_fuse<T: Scalar>(f_rgb: &Tensor<T>, f_tir: &Tensor<T>) -> Result<Tensor<T>> {
    f_rgb.expect_same_shape(f_tir, "oracle_fuse")?;
    let (c, h, w) = f_rgb.chw()?;
    let per = c * h * w;
    let plane = h * w;
    let mut out = Vec::with_capacity(f_rgb.len());
    for (a, b) in f_rgb.data().chunks(per).zip(f_tir.data().chunks(per)) {
        let a64: Vec<f64> = a.iter().map(|v| v.to_f64_lossy()).collect();
        let b64: Vec<f64> = b.iter().map(|v| v.to_f64_lossy()).collect();
        let ea = local_energy(&a64, c, h, w);
        let eb = local_energy(&b64, c, h, w);
        for (i, (&x, &y)) in a64.iter().zip(&b64).enumerate() {
            let p = i % plane;
            let gate = ea[p] / (ea[p] + eb[p] + ORACLE_EPS);
            let v = (y + gate * (x - y)).clamp(x.min(y), x.max(y));
            out.push(T::lit(v));
        }
    }
    Tensor::from_vec(f_rgb.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world() -> World {
        World::new(ScenarioConfig { channels: 4, height: 8, width: 8, ..Default::default() }).unwrap()
    }

    #[test]
    fn oracle_fixed_point_and_degenerate_gate() {
        let w = world();
        let s: Scenario<f64> = scenario_at(&w, 1, 0, 0, Challenge::Clean);
        assert_eq!(oracle_fuse(&s.f_rgb, &s.f_rgb).unwrap(), s.f_rgb);
        let zero = Tensor::zeros(s.f_tir.shape());
        assert_eq!(oracle_fuse(&zero, &s.f_tir).unwrap(), s.f_tir);
    }

    #[test]
    fn fused_oracle_is_oracle_of_observed_maps() {
        let w = world();
        for (i, &ch) in Challenge::ALL.iter().enumerate() {
            let s: Scenario<f64> = scenario_at(&w, 3, 0, i as u64, ch);
            assert_eq!(s.fused_oracle, oracle_fuse(&s.f_rgb, &s.f_tir).unwrap());
        }
    }

    #[test]
    fn rgb_degraded_target_energy_ratio() {
        let w = world();
        let bbox = BBox::new(3.0, 4.0, 2.0, 2.0);
        let (rgb, tir) = target_components(&w, &bbox, Challenge::RgbDegraded);
        let e = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
        assert!(e(&rgb) <= 0.1 * e(&tir));
    }

    #[test]
    fn challenge_tags_round_trip() {
        for c in Challenge::ALL {
            assert_eq!(Challenge::from_tag(c.tag()).unwrap(), c);
        }
        assert!(Challenge::from_tag(4).is_err());
    }
}
