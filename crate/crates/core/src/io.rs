//! Binary checkpoint and scenario files, and CSV writers.
//!
//! Checkpoint layout (little-endian):
//!
//! ```text
//! "GMCK" | version u32 | config_len u32 | config (TOML, UTF-8)
//! | method u8 | epoch u64 | step u64 | section_count u32
//! | per section: name_len u32 | name | rank u32 | dims u64 x rank | values f64 x prod(dims)
//! | checksum u64 (first 8 bytes of SHA-256 over everything before it)
//! ```
//!
//! Scenario layout (little-endian):
//!
//! ```text
//! "GMMT" | version u32 | C u32 | H u32 | W u32
//! | f_rgb f64 x CHW | f_tir f64 x CHW | fused f64 x CHW
//! | cx cy w h f64 | challenge u8
//! ```

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{GmmtError, Result};
use crate::fusion::{Challenge, Method, Pipeline, Scenario};
use crate::metrics::sweep::{percent, PipelineEval};
use crate::metrics::BBox;
use crate::nets::DenoiserConfig;
use crate::scalar::Scalar;
use crate::tensor::{ParamSet, Tensor};
use crate::trainers::{LogRow, TrainState};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GMCK";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const SCENARIO_MAGIC: &[u8; 4] = b"GMMT";
pub const SCENARIO_VERSION: u32 = 1;

#[derive(Default)]
struct Encoder(Vec<u8>);

impl Encoder {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.0.extend_from_slice(b);
    }
    fn tensor<T: Scalar>(&mut self, t: &Tensor<T>) {
        for v in t.data() {
            self.f64(v.to_f64_lossy());
        }
    }
}

struct Decoder<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Decoder<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Decoder { buf, at: 0 }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| GmmtError::data("file truncated"))?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
    fn tensor<T: Scalar>(&mut self, shape: &[usize]) -> Result<Tensor<T>> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.f64().map(T::lit)).collect::<Result<_>>()?;
        Tensor::from_vec(shape.to_vec(), data)
    }
    fn finish(&self) -> Result<()> {
        if self.at != self.buf.len() {
            return Err(GmmtError::data(format!("{} trailing bytes", self.buf.len() - self.at)));
        }
        Ok(())
    }
}

fn checksum(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

fn magic(d: &mut Decoder, want: &[u8; 4], version: u32) -> Result<()> {
    if d.take(4)? != want {
        return Err(GmmtError::data(format!("bad magic (expected {})", String::from_utf8_lossy(want))));
    }
    let found = d.u32()?;
    if found != version {
        return Err(GmmtError::Version { found, expected: version });
    }
    Ok(())
}

/// A trained (or freshly initialised) pipeline with its run configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub config: RunConfig,
    pub pipeline: Pipeline<T>,
    pub state: TrainState,
}

/// Named tensors of every parameter set, optimiser buffer and running statistic.
fn sections<T: Scalar>(p: &Pipeline<T>) -> Vec<(String, &Tensor<T>)> {
    let mut sets: Vec<(&str, &ParamSet<T>)> =
        vec![("generator", &p.generator.params), ("typical", &p.typical.params), ("head", &p.head.params)];
    if let Some(d) = &p.discriminator {
        sets.push(("discriminator", &d.params));
    }
    let mut out = Vec::new();
    for (prefix, ps) in sets {
        for (name, param) in ps.iter() {
            out.push((format!("{prefix}.{name}"), &param.value));
            out.push((format!("{prefix}.{name}#momentum"), &param.momentum));
        }
    }
    out
}

fn running_stats<T: Scalar>(p: &Pipeline<T>) -> Vec<(String, Vec<T>)> {
    let mut out = Vec::new();
    if let Some(d) = &p.discriminator {
        for (i, r) in d.running.iter().enumerate() {
            out.push((format!("discriminator.running{i}.mean"), r.mean.clone()));
            out.push((format!("discriminator.running{i}.var"), r.var.clone()));
        }
    }
    out
}

pub fn encode_checkpoint<T: Scalar>(ck: &Checkpoint<T>) -> Result<Vec<u8>> {
    let mut e = Encoder::default();
    e.0.extend_from_slice(CHECKPOINT_MAGIC);
    e.u32(CHECKPOINT_VERSION);
    e.bytes(ck.config.to_toml()?.as_bytes());
    e.u8(ck.pipeline.method.tag());
    e.u64(ck.state.epoch as u64);
    e.u64(ck.state.step as u64);
    let secs = sections(&ck.pipeline);
    let running = running_stats(&ck.pipeline);
    e.u32((secs.len() + running.len()) as u32);
    for (name, t) in &secs {
        e.bytes(name.as_bytes());
        e.u32(t.shape().len() as u32);
        for &d in t.shape() {
            e.u64(d as u64);
        }
        e.tensor(t);
    }
    for (name, v) in &running {
        e.bytes(name.as_bytes());
        e.u32(1);
        e.u64(v.len() as u64);
        for x in v {
            e.f64(x.to_f64_lossy());
        }
    }
    let sum = checksum(&e.0);
    e.u64(sum);
    Ok(e.0)
}

/// Decodes a checkpoint. With `expected`, the stored denoiser configuration
/// must match it exactly. Nothing is returned unless every section loads.
pub fn decode_checkpoint<T: Scalar>(bytes: &[u8], expected: Option<&DenoiserConfig>) -> Result<Checkpoint<T>> {
    if bytes.len() < 16 {
        return Err(GmmtError::data("checkpoint truncated"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    let computed = checksum(body);
    let mut d = Decoder::new(body);
    magic(&mut d, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    if stored != computed {
        return Err(GmmtError::Checksum { stored, computed });
    }
    let text = std::str::from_utf8(d.bytes()?).map_err(|_| GmmtError::data("config block is not UTF-8"))?;
    let config = RunConfig::from_toml(text)?;
    if let Some(want) = expected {
        let have = config.denoiser_config();
        if &have != want {
            return Err(GmmtError::config(format!("checkpoint denoiser config {have:?} does not match {want:?}")));
        }
    }
    let method = Method::from_tag(d.u8()?)?;
    let state = TrainState { epoch: d.u64()? as usize, step: d.u64()? as usize };
    let count = d.u32()? as usize;
    let mut stored_secs: BTreeMap<String, (Vec<usize>, Vec<T>)> = BTreeMap::new();
    for _ in 0..count {
        let name = String::from_utf8(d.bytes()?.to_vec()).map_err(|_| GmmtError::data("section name is not UTF-8"))?;
        let rank = d.u32()? as usize;
        let shape = (0..rank).map(|_| d.u64().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let t: Tensor<T> = d.tensor(&shape)?;
        if stored_secs.insert(name.clone(), (shape, t.into_data())).is_some() {
            return Err(GmmtError::data(format!("duplicate section '{name}'")));
        }
    }
    d.finish()?;

    let mut pipe = Pipeline::<T>::new(&config.pipeline_spec(method)?, 0)?;
    let mut take = |name: &str, shape: &[usize]| -> Result<Vec<T>> {
        match stored_secs.remove(name) {
            Some((s, v)) if s == shape => Ok(v),
            Some((s, _)) => Err(GmmtError::data(format!("section '{name}' has shape {s:?}, expected {shape:?}"))),
            None => Err(GmmtError::data(format!("missing section '{name}'"))),
        }
    };
    let mut fill = |prefix: &str, ps: &mut ParamSet<T>| -> Result<()> {
        for (name, p) in ps.iter_mut() {
            let shape = p.value.shape().to_vec();
            p.value = Tensor::from_vec(shape.clone(), take(&format!("{prefix}.{name}"), &shape)?)?;
            p.momentum = Tensor::from_vec(shape.clone(), take(&format!("{prefix}.{name}#momentum"), &shape)?)?;
        }
        Ok(())
    };
    fill("generator", &mut pipe.generator.params)?;
    fill("typical", &mut pipe.typical.params)?;
    fill("head", &mut pipe.head.params)?;
    if let Some(disc) = pipe.discriminator.as_mut() {
        fill("discriminator", &mut disc.params)?;
        for (i, r) in disc.running.iter_mut().enumerate() {
            let n = r.mean.len();
            r.mean = take(&format!("discriminator.running{i}.mean"), &[n])?;
            r.var = take(&format!("discriminator.running{i}.var"), &[n])?;
        }
    }
    if let Some(extra) = stored_secs.keys().next() {
        return Err(GmmtError::data(format!("unexpected section '{extra}'")));
    }
    Ok(Checkpoint { config, pipeline: pipe, state })
}

pub fn save_checkpoint<T: Scalar>(path: &Path, ck: &Checkpoint<T>) -> Result<()> {
    std::fs::write(path, encode_checkpoint(ck)?)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path, expected: Option<&DenoiserConfig>) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path)
        .map_err(|e| GmmtError::data(format!("cannot read checkpoint {}: {e}", path.display())))?;
    decode_checkpoint(&bytes, expected)
}

pub fn encode_scenario<T: Scalar>(s: &Scenario<T>) -> Result<Vec<u8>> {
    let (c, h, w) = s.f_rgb.chw()?;
    for t in [&s.f_tir, &s.fused_oracle] {
        s.f_rgb.expect_same_shape(t, "scenario maps")?;
    }
    let mut e = Encoder::default();
    e.0.extend_from_slice(SCENARIO_MAGIC);
    e.u32(SCENARIO_VERSION);
    for d in [c, h, w] {
        e.u32(d as u32);
    }
    e.tensor(&s.f_rgb);
    e.tensor(&s.f_tir);
    e.tensor(&s.fused_oracle);
    for v in [s.bbox.cx, s.bbox.cy, s.bbox.w, s.bbox.h] {
        e.f64(v);
    }
    e.u8(s.challenge.tag());
    Ok(e.0)
}

pub fn decode_scenario<T: Scalar>(bytes: &[u8]) -> Result<Scenario<T>> {
    let mut d = Decoder::new(bytes);
    magic(&mut d, SCENARIO_MAGIC, SCENARIO_VERSION)?;
    let shape = [d.u32()? as usize, d.u32()? as usize, d.u32()? as usize];
    let f_rgb = d.tensor(&shape)?;
    let f_tir = d.tensor(&shape)?;
    let fused_oracle = d.tensor(&shape)?;
    let bbox = BBox::new(d.f64()?, d.f64()?, d.f64()?, d.f64()?);
    let challenge = Challenge::from_tag(d.u8()?)?;
    d.finish()?;
    Ok(Scenario { f_rgb, f_tir, fused_oracle, bbox, challenge })
}

pub fn write_scenario<T: Scalar>(path: &Path, s: &Scenario<T>) -> Result<()> {
    std::fs::write(path, encode_scenario(s)?)?;
    Ok(())
}

pub fn read_scenario<T: Scalar>(path: &Path) -> Result<Scenario<T>> {
    decode_scenario(&std::fs::read(path)?)
}

/// Per-step loss log.
pub struct LossLogWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> LossLogWriter<W> {
    pub fn new(out: W) -> Result<Self> {
        let mut inner = csv::Writer::from_writer(out);
        inner.write_record(["step", "epoch", "lr", "loss_track", "loss_gen", "total", "loss_D0", "loss_D1"])?;
        Ok(LossLogWriter { inner })
    }

    pub fn write(&mut self, row: &LogRow) -> Result<()> {
        let l = &row.losses;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        self.inner.write_record([
            row.step.to_string(),
            row.epoch.to_string(),
            row.lr.to_string(),
            l.loss_track.to_string(),
            l.loss_gen.to_string(),
            l.total.to_string(),
            opt(l.loss_d0),
            opt(l.loss_d1),
        ])?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.inner.flush()?;
        Ok(())
    }
}

/// Method comparison table: one row per method.
pub fn write_ablation_csv<W: Write>(out: W, rows: &[(Method, PipelineEval)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["method", "pr", "npr", "sr_auc", "sr_ratio", "re", "f_score", "ssim_mean", "fused_mse"])?;
    for (m, e) in rows {
        let r = &e.report;
        w.write_record([
            m.label().to_string(),
            percent(r.pr),
            percent(r.npr),
            percent(r.sr_auc),
            percent(r.sr_ratio),
            percent(r.re),
            percent(r.f_score),
            format!("{:.4}", e.ssim_mean),
            format!("{:.6}", e.fused_mse),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::{scenario_at, ScenarioConfig, World};

    fn small() -> RunConfig {
        let mut c = RunConfig::default();
        c.scenario = ScenarioConfig { channels: 4, height: 8, width: 8, ..Default::default() };
        c.denoiser.base_channels = 4;
        c
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let cfg = small();
        let pipe = Pipeline::<f64>::new(&cfg.pipeline_spec(Method::Dm).unwrap(), 3).unwrap();
        let ck = Checkpoint { config: cfg, pipeline: pipe, state: TrainState { epoch: 2, step: 9 } };
        let bytes = encode_checkpoint(&ck).unwrap();
        let back: Checkpoint<f64> = decode_checkpoint(&bytes, None).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn corrupted_byte_fails_checksum() {
        let cfg = small();
        let pipe = Pipeline::<f64>::new(&cfg.pipeline_spec(Method::Raw).unwrap(), 3).unwrap();
        let ck = Checkpoint { config: cfg, pipeline: pipe, state: TrainState::default() };
        let mut bytes = encode_checkpoint(&ck).unwrap();
        let i = bytes.len() / 2;
        bytes[i] ^= 0x40;
        assert!(matches!(decode_checkpoint::<f64>(&bytes, None), Err(GmmtError::Checksum { .. })));
    }

    #[test]
    fn mismatched_denoiser_config_is_config_error() {
        let cfg = small();
        let pipe = Pipeline::<f64>::new(&cfg.pipeline_spec(Method::Dm).unwrap(), 3).unwrap();
        let ck = Checkpoint { config: cfg.clone(), pipeline: pipe, state: TrainState::default() };
        let bytes = encode_checkpoint(&ck).unwrap();
        let mut other = cfg.denoiser_config();
        other.blocks = 3;
        assert!(matches!(decode_checkpoint::<f64>(&bytes, Some(&other)), Err(GmmtError::Config(_))));
    }

    #[test]
    fn scenario_round_trip() {
        let w = World::new(ScenarioConfig { channels: 2, height: 8, width: 8, ..Default::default() }).unwrap();
        let s: Scenario<f64> = scenario_at(&w, 5, 0, 1, Challenge::BothNoisy);
        let back: Scenario<f64> = decode_scenario(&encode_scenario(&s).unwrap()).unwrap();
        assert_eq!(back, s);
    }
}
