//! Pipeline evaluation over a scenario set and per-axis sweeps.

use std::io::Write;

use super::{evaluate, ssim, EvalReport, FramePair, MetricsConfig};
use crate::diffusion::StepPlan;
use crate::error::{GmmtError, Result};
use crate::fusion::{Pipeline, Scenario};
use crate::scalar::Scalar;

/// Swept hyper-parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Reverse-diffusion step count `s`.
    Steps,
    /// Generative-loss weight.
    Lambda,
    /// Encoder/decoder block count `n`.
    Blocks,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Steps => "steps",
            Axis::Lambda => "lambda",
            Axis::Blocks => "blocks",
        }
    }

    pub fn default_values(self) -> Vec<f64> {
        let v: &[f64] = match self {
            Axis::Steps => &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 15.0, 20.0, 30.0, 40.0],
            Axis::Lambda => &[0.0, 1.0, 2.0, 3.0, 5.0, 10.0, 100.0],
            Axis::Blocks => &[3.0, 6.0, 9.0, 12.0, 15.0],
        };
        v.to_vec()
    }
}

impl std::str::FromStr for Axis {
    type Err = GmmtError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "steps" | "s" => Ok(Axis::Steps),
            "lambda" => Ok(Axis::Lambda),
            "blocks" | "n" => Ok(Axis::Blocks),
            _ => Err(GmmtError::config(format!("unknown sweep axis '{s}' (expected steps, lambda or blocks)"))),
        }
    }
}

/// Tracking report of a pipeline plus fused-feature fidelity against the oracle.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineEval {
    pub report: EvalReport,
    pub ssim_mean: f64,
    pub fused_mse: f64,
}

pub fn evaluate_pipeline<T: Scalar>(
    pipe: &Pipeline<T>,
    scenarios: &[Scenario<T>],
    plan: &StepPlan,
    seed: u64,
    cfg: &MetricsConfig,
) -> Result<PipelineEval> {
    if scenarios.is_empty() {
        return Err(GmmtError::data("empty scenario set"));
    }
    let out = pipe.predict_all(scenarios, plan, seed)?;
    let frames: Vec<FramePair> = out.iter().zip(scenarios).map(|((p, _), s)| FramePair::new(p.bbox, s.bbox)).collect();
    let mut ssim_sum = 0.0;
    let mut mse_sum = 0.0;
    for ((_, fused), s) in out.iter().zip(scenarios) {
        ssim_sum += ssim(fused, &s.fused_oracle)?;
        mse_sum += fused.mse(&s.fused_oracle)?.to_f64_lossy();
    }
    let n = scenarios.len() as f64;
    Ok(PipelineEval { report: evaluate(&frames, cfg)?, ssim_mean: ssim_sum / n, fused_mse: mse_sum / n })
}

/// One line of a report CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub axis_value: String,
    pub report: EvalReport,
    pub ssim_mean: Option<f64>,
}

/// Evaluates one model per axis value. `model_for` builds (or trains) the
/// pipeline and sampler plan for a value. SSIM is reported on the step axis.
pub fn sweep_eval<T, F>(
    axis: Axis,
    values: &[f64],
    scenarios: &[Scenario<T>],
    seed: u64,
    cfg: &MetricsConfig,
    mut model_for: F,
) -> Result<Vec<ReportRow>>
where
    T: Scalar,
    F: FnMut(f64) -> Result<(Pipeline<T>, StepPlan)>,
{
    if values.is_empty() {
        return Err(GmmtError::config("sweep needs at least one value"));
    }
    values
        .iter()
        .map(|&v| {
            let (pipe, plan) = model_for(v)?;
            let e = evaluate_pipeline(&pipe, scenarios, &plan, seed, cfg)?;
            Ok(ReportRow {
                axis_value: format!("{v}"),
                report: e.report,
                ssim_mean: (axis == Axis::Steps).then_some(e.ssim_mean),
            })
        })
        .collect()
}

/// Rate as a percentage with one decimal.
pub fn percent(rate: f64) -> String {
    format!("{:.1}", rate * 100.0)
}

pub fn write_report_csv<W: Write>(out: W, rows: &[ReportRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["axis_value", "pr", "npr", "sr_auc", "sr_ratio", "re", "f_score", "ssim_mean"])?;
    for r in rows {
        let e = &r.report;
        w.write_record([
            r.axis_value.clone(),
            percent(e.pr),
            percent(e.npr),
            percent(e.sr_auc),
            percent(e.sr_ratio),
            percent(e.re),
            percent(e.f_score),
            r.ssim_mean.map(|s| format!("{s:.4}")).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
