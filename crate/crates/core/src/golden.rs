//! Reference artefacts pinned by the files under `crates/core/tests/golden`.
//!
//! `gmmt goldens --force` regenerates them; the core test suite compares the
//! functions below against the stored bytes.

use std::path::{Path, PathBuf};

use crate::error::{GmmtError, Result};
use crate::fusion::{scenario_at, Challenge, Scenario, ScenarioConfig, World};
use crate::io::write_scenario;
use crate::nets::{Denoiser, DenoiserConfig};
use crate::rng::{self, streams};
use crate::tensor::Tensor;

pub const GOLDEN_SEED: u64 = 7;
/// Timestep fed to the denoiser golden.
pub const GOLDEN_TIMESTEP: usize = 500;
pub const DENOISER_FILE: &str = "denoiser_output.f64";

pub fn golden_world() -> World {
    World::new(ScenarioConfig { channels: 4, height: 8, width: 8, ..Default::default() }).expect("valid golden world")
}

pub fn scenario_file(challenge: Challenge) -> String {
    format!("scenario_{}.gmmt", challenge.name())
}

/// One scenario per challenge on the 4-channel 8x8 world.
pub fn golden_scenarios() -> Vec<(String, Scenario<f64>)> {
    let world = golden_world();
    Challenge::ALL
        .iter()
        .enumerate()
        .map(|(i, &c)| (scenario_file(c), scenario_at(&world, GOLDEN_SEED, streams::EVAL_SCENARIOS, i as u64, c)))
        .collect()
}

pub fn golden_denoiser() -> Denoiser<f64> {
    let w = golden_world();
    let cfg = DenoiserConfig {
        blocks: 2,
        base_channels: 8,
        feature_channels: w.config.channels,
        height: w.config.height,
        width: w.config.width,
        time_embed_dim: 8,
        max_timestep: 1000,
    };
    let mut d = Denoiser::new(cfg, &mut rng::stream(GOLDEN_SEED, streams::INIT_DENOISER)).expect("valid golden denoiser");
    // A nonzero output projection so the output depends on every input slot.
    let out = d.params.by_name_mut("out.weight").expect("output projection");
    out.value = rng::uniform_tensor(&mut rng::stream(GOLDEN_SEED, 0x601D), out.value.shape(), -0.2, 0.2);
    d
}

/// Denoiser output on the clean golden scenario with `x_t = fused_oracle`.
/// The channel order of the input concatenation is visible in this value.
pub fn golden_denoiser_output() -> Result<Tensor<f64>> {
    let (_, s) = golden_scenarios().remove(0);
    let (c, h, w) = s.f_rgb.chw()?;
    let b = |t: &Tensor<f64>| t.clone().reshape(&[1, c, h, w]);
    golden_denoiser().predict(&b(&s.fused_oracle)?, &b(&s.f_rgb)?, &b(&s.f_tir)?, &[GOLDEN_TIMESTEP])
}

/// Little-endian `rank u32 | dims u32 x rank | values f64`.
pub fn encode_tensor(t: &Tensor<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * t.shape().len() + 8 * t.len());
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor<f64>> {
    let word = |i: usize| -> Result<[u8; 4]> {
        bytes.get(i..i + 4).and_then(|b| b.try_into().ok()).ok_or_else(|| GmmtError::data("truncated tensor file"))
    };
    let rank = u32::from_le_bytes(word(0)?) as usize;
    let shape = (0..rank).map(|k| word(4 + 4 * k).map(|b| u32::from_le_bytes(b) as usize)).collect::<Result<Vec<_>>>()?;
    let body = &bytes[4 + 4 * rank..];
    let n: usize = shape.iter().product();
    if body.len() != 8 * n {
        return Err(GmmtError::data(format!("tensor file holds {} bytes for {n} values", body.len())));
    }
    let data = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Tensor::from_vec(shape, data)
}

/// Writes every golden file into `dir`, creating it if needed.
pub fn write_goldens(dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for (name, s) in golden_scenarios() {
        let p = dir.join(name);
        write_scenario(&p, &s)?;
        written.push(p);
    }
    let p = dir.join(DENOISER_FILE);
    std::fs::write(&p, encode_tensor(&golden_denoiser_output()?))?;
    written.push(p);
    Ok(written)
}
