//! Tracking benchmark kernels: precision (PR), normalised precision (NPR),
//! success (SR, both the ratio and the area-under-curve reading), recall and
//! F-score, plus SSIM for comparing feature maps.
//!
//! Rates are fractions in `[0, 1]`; reports scale them by 100.

mod ssim;
pub mod sweep;

pub use ssim::{ssim, ssim_plane, SSIM_WINDOW};
pub use sweep::{sweep_eval, write_report_csv, Axis, ReportRow};

use serde::{Deserialize, Serialize};

use crate::error::{GmmtError, Result};

/// Axis-aligned box given by its centre and extents, in grid units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox { cx, cy, w, h }
    }

    pub fn center_distance(&self, other: &BBox) -> f64 {
        (self.cx - other.cx).hypot(self.cy - other.cy)
    }

    /// Intersection over union; zero-area boxes have IoU 0.
    pub fn iou(&self, other: &BBox) -> f64 {
        let ix = overlap(self.cx, self.w, other.cx, other.w);
        let iy = overlap(self.cy, self.h, other.cy, other.h);
        let inter = ix * iy;
        let union = self.w * self.h + other.w * other.h - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

fn overlap(c0: f64, e0: f64, c1: f64, e1: f64) -> f64 {
    let lo = (c0 - e0 / 2.0).max(c1 - e1 / 2.0);
    let hi = (c0 + e0 / 2.0).min(c1 + e1 / 2.0);
    (hi - lo).max(0.0)
}

/// One evaluated frame. `pred_present` is false when the tracker reports no
/// target; `truth_present` is false when the object is absent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FramePair {
    pub pred: BBox,
    pub truth: BBox,
    pub truth_present: bool,
    pub pred_present: bool,
}

impl FramePair {
    pub fn new(pred: BBox, truth: BBox) -> Self {
        FramePair { pred, truth, truth_present: true, pred_present: true }
    }

    fn iou(&self) -> f64 {
        if self.pred_present {
            self.pred.iou(&self.truth)
        } else {
            0.0
        }
    }
}

fn present(frames: &[FramePair]) -> Result<Vec<&FramePair>> {
    let p: Vec<_> = frames.iter().filter(|f| f.truth_present).collect();
    if p.is_empty() {
        return Err(GmmtError::data("no frames with the target present"));
    }
    Ok(p)
}

fn fraction(hits: usize, total: usize) -> f64 {
    hits as f64 / total as f64
}

/// Fraction of present frames whose centre distance is strictly below `threshold`.
pub fn precision_rate(frames: &[FramePair], threshold: f64) -> Result<f64> {
    let p = present(frames)?;
    let hits = p.iter().filter(|f| f.pred_present && f.pred.center_distance(&f.truth) < threshold).count();
    Ok(fraction(hits, p.len()))
}

/// Centre offset scaled componentwise by the truth extents.
pub fn normalized_distance(pred: &BBox, truth: &BBox) -> Result<f64> {
    if truth.w <= 0.0 || truth.h <= 0.0 {
        return Err(GmmtError::data(format!("truth box has zero extent: {truth:?}")));
    }
    Ok(((pred.cx - truth.cx) / truth.w).hypot((pred.cy - truth.cy) / truth.h))
}

/// Like [`precision_rate`] on the box-normalised distance.
pub fn norm_precision_rate(frames: &[FramePair], threshold: f64) -> Result<f64> {
    let p = present(frames)?;
    let mut hits = 0;
    for f in &p {
        let d = normalized_distance(&f.pred, &f.truth)?;
        if f.pred_present && d < threshold {
            hits += 1;
        }
    }
    Ok(fraction(hits, p.len()))
}

/// Overlap thresholds `0, 0.05, ..., 1.0`.
pub fn success_thresholds() -> Vec<f64> {
    (0..=20).map(|i| f64::from(i) * 0.05).collect()
}

/// `success(tau)` for each threshold: IoU >= tau, except tau = 0 which counts IoU > 0.
pub fn success_curve(frames: &[FramePair]) -> Result<Vec<(f64, f64)>> {
    let p = present(frames)?;
    let ious: Vec<f64> = p.iter().map(|f| f.iou()).collect();
    Ok(success_thresholds()
        .into_iter()
        .map(|tau| {
            let hits = ious.iter().filter(|&&v| if tau == 0.0 { v > 0.0 } else { v >= tau }).count();
            (tau, fraction(hits, ious.len()))
        })
        .collect())
}

/// `(sr_auc, sr_ratio)`: mean of the success curve, and fraction with IoU > 0.
pub fn success_rate(frames: &[FramePair]) -> Result<(f64, f64)> {
    let curve = success_curve(frames)?;
    let auc = curve.iter().map(|&(_, s)| s).sum::<f64>() / curve.len() as f64;
    Ok((auc, curve[0].1))
}

/// Harmonic mean, 0 when both inputs are 0.
pub fn fscore(pr: f64, re: f64) -> f64 {
    if pr + re == 0.0 {
        0.0
    } else {
        2.0 * pr * re / (pr + re)
    }
}

/// Long-term tracking scores: a frame is tracked when the tracker reports a
/// target overlapping the truth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackedScores {
    /// Tracked frames over frames where the tracker reported a target.
    pub precision: f64,
    /// Tracked frames over frames where the target is present.
    pub recall: f64,
    pub f_score: f64,
}

pub fn recall_and_fscore(frames: &[FramePair]) -> Result<TrackedScores> {
    let p = present(frames)?;
    let tracked = p.iter().filter(|f| f.iou() > 0.0).count();
    let reported = frames.iter().filter(|f| f.pred_present).count();
    let precision = if reported == 0 { 0.0 } else { fraction(tracked, reported) };
    let recall = fraction(tracked, p.len());
    Ok(TrackedScores { precision, recall, f_score: fscore(precision, recall) })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    /// PR centre-distance threshold in grid cells.
    pub pr_threshold: f64,
    pub npr_threshold: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig { pr_threshold: 2.0, npr_threshold: 0.2 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub pr: f64,
    pub npr: f64,
    pub sr_auc: f64,
    pub sr_ratio: f64,
    pub re: f64,
    pub f_score: f64,
    pub tracked_precision: f64,
    pub pr_threshold: f64,
    pub npr_threshold: f64,
    pub pr_curve: Vec<(f64, f64)>,
    pub npr_curve: Vec<(f64, f64)>,
    pub success_curve: Vec<(f64, f64)>,
}

pub fn evaluate(frames: &[FramePair], cfg: &MetricsConfig) -> Result<EvalReport> {
    let pr_curve = (0..=20)
        .map(|i| {
            let t = f64::from(i) * 0.5;
            precision_rate(frames, t).map(|v| (t, v))
        })
        .collect::<Result<_>>()?;
    let npr_curve = (0..=10)
        .map(|i| {
            let t = f64::from(i) * 0.05;
            norm_precision_rate(frames, t).map(|v| (t, v))
        })
        .collect::<Result<_>>()?;
    let (sr_auc, sr_ratio) = success_rate(frames)?;
    let tracked = recall_and_fscore(frames)?;
    Ok(EvalReport {
        pr: precision_rate(frames, cfg.pr_threshold)?,
        npr: norm_precision_rate(frames, cfg.npr_threshold)?,
        sr_auc,
        sr_ratio,
        re: tracked.recall,
        f_score: tracked.f_score,
        tracked_precision: tracked.precision,
        pr_threshold: cfg.pr_threshold,
        npr_threshold: cfg.npr_threshold,
        pr_curve,
        npr_curve,
        success_curve: success_curve(frames)?,
    })
}
