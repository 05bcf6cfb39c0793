use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use gmmt_core::config::RunConfig;
use gmmt_core::diffusion::StepPlan;
use gmmt_core::fusion::{held_out, Method, Pipeline, Scenario};
use gmmt_core::golden::write_goldens;
use gmmt_core::io::{load_checkpoint, read_scenario, save_checkpoint, write_ablation_csv, write_scenario, Checkpoint, LossLogWriter};
use gmmt_core::metrics::sweep::evaluate_pipeline;
use gmmt_core::metrics::{sweep_eval, write_report_csv, Axis, ReportRow};
use gmmt_core::trainers::{train as run_training, TrainState};
use gmmt_core::{GmmtError, Result};

use crate::Common;

pub const CHECKPOINT_FILE: &str = "checkpoint.gmck";
const DEFAULT_GOLDEN_DIR: &str = "crates/core/tests/golden";

fn apply_overrides(cfg: &mut RunConfig, c: &Common) {
    if let Some(v) = c.seed {
        cfg.seed = v;
    }
    if let Some(v) = c.mode {
        cfg.trainer.mode = v;
    }
    if let Some(v) = c.steps {
        cfg.schedule.sampler_steps = v;
    }
    if let Some(v) = c.lambda {
        cfg.trainer.lambda = v;
    }
    if let Some(v) = c.blocks {
        cfg.denoiser.blocks = v;
    }
    if let Some(v) = &c.out {
        cfg.out_dir = v.clone();
    }
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    apply_overrides(&mut cfg, c);
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    Ok(cfg.out_dir.clone())
}

fn csv_file(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn fit(cfg: &RunConfig, method: Method) -> Result<Pipeline<f64>> {
    let mut trainer = cfg.trainer.clone();
    trainer.mode = method;
    let mut pipe = Pipeline::new(&cfg.pipeline_spec(method)?, cfg.seed)?;
    run_training(&mut pipe, &cfg.world()?, &trainer, cfg.seed, &mut TrainState::default(), |_| Ok(()))?;
    Ok(pipe)
}

fn eval_set(cfg: &RunConfig) -> Result<Vec<Scenario<f64>>> {
    Ok(held_out(&cfg.world()?, cfg.seed, cfg.scenario.eval_scenarios, None))
}

pub fn train(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let dir = out_dir(&cfg)?;
    let world = cfg.world()?;
    let mut pipeline = Pipeline::<f64>::new(&cfg.pipeline_spec(cfg.trainer.mode)?, cfg.seed)?;
    let mut state = TrainState::default();
    let mut log = LossLogWriter::new(csv_file(&dir.join("loss.csv"))?)?;
    let run = run_training(&mut pipeline, &world, &cfg.trainer, cfg.seed, &mut state, |row| log.write(row));
    log.flush()?;
    if let Err(e) = &run {
        if !matches!(e, GmmtError::Numeric(_)) {
            return run;
        }
        eprintln!("training stopped at step {}; saving the last good parameters", state.step);
    }
    let path = dir.join(CHECKPOINT_FILE);
    save_checkpoint(&path, &Checkpoint { config: cfg, pipeline, state })?;
    println!("wrote {} after {} steps", path.display(), state.step);
    run
}

/// Loads a checkpoint. The run config comes from `--config` when given (and
/// must then describe the checkpoint's denoiser), else from the checkpoint's
/// own snapshot; command-line flags apply on top either way.
fn open_checkpoint(c: &Common, path: Option<&Path>) -> Result<(RunConfig, Pipeline<f64>)> {
    let requested = load_config(c)?;
    let path = path.map(Path::to_path_buf).unwrap_or_else(|| requested.out_dir.join(CHECKPOINT_FILE));
    let strict = c.config.is_some() || c.blocks.is_some();
    let ck = load_checkpoint::<f64>(&path, strict.then(|| requested.denoiser_config()).as_ref())?;
    let cfg = if c.config.is_some() {
        requested
    } else {
        let mut cfg = ck.config;
        apply_overrides(&mut cfg, c);
        cfg.validate()?;
        cfg
    };
    if c.mode.is_some_and(|m| m != ck.pipeline.method) {
        return Err(GmmtError::config(format!(
            "checkpoint holds a {} pipeline, not {}",
            ck.pipeline.method.label(),
            cfg.trainer.mode.label()
        )));
    }
    Ok((cfg, ck.pipeline))
}

pub fn infer(c: &Common, checkpoint: Option<&Path>, input: Option<&Path>, count: usize) -> Result<()> {
    let (cfg, pipe) = open_checkpoint(c, checkpoint)?;
    let scenarios = match input {
        Some(p) => vec![read_scenario::<f64>(p)?],
        None => held_out(&cfg.world()?, cfg.seed, count, None),
    };
    if scenarios.is_empty() {
        return Err(GmmtError::data("no scenarios to fuse"));
    }
    let dir = out_dir(&cfg)?;
    let out = pipe.predict_all(&scenarios, &cfg.step_plan()?, cfg.seed)?;
    let mut table = csv::Writer::from_writer(csv_file(&dir.join("infer.csv"))?);
    table.write_record(["index", "challenge", "pred_cx", "pred_cy", "pred_w", "pred_h", "truth_cx", "truth_cy", "truth_w", "truth_h"])?;
    for (i, ((pred, fused), s)) in out.into_iter().zip(&scenarios).enumerate() {
        // Same layout as a scenario file, with fused* and the predicted box.
        let dump = Scenario { fused_oracle: fused, bbox: pred.bbox, ..s.clone() };
        write_scenario(&dir.join(format!("fused_{i:04}.gmmt")), &dump)?;
        let (p, t) = (pred.bbox, s.bbox);
        let mut rec = vec![i.to_string(), s.challenge.name().to_string()];
        rec.extend([p.cx, p.cy, p.w, p.h, t.cx, t.cy, t.w, t.h].iter().map(|v| v.to_string()));
        table.write_record(&rec)?;
    }
    table.flush()?;
    println!("fused {} scenario(s) into {}", scenarios.len(), dir.display());
    Ok(())
}

pub fn eval(c: &Common, checkpoint: Option<&Path>) -> Result<()> {
    let (cfg, pipe) = open_checkpoint(c, checkpoint)?;
    let scenarios = eval_set(&cfg)?;
    let e = evaluate_pipeline(&pipe, &scenarios, &cfg.step_plan()?, cfg.seed, &cfg.metrics)?;
    let dir = out_dir(&cfg)?;
    let row = ReportRow { axis_value: pipe.method.label().to_string(), report: e.report.clone(), ssim_mean: Some(e.ssim_mean) };
    write_report_csv(csv_file(&dir.join("eval.csv"))?, &[row])?;
    let mut curves = csv::Writer::from_writer(csv_file(&dir.join("eval_curves.csv"))?);
    curves.write_record(["curve", "threshold", "rate"])?;
    for (name, curve) in [("pr", &e.report.pr_curve), ("npr", &e.report.npr_curve), ("success", &e.report.success_curve)] {
        for (t, r) in curve {
            curves.write_record([name.to_string(), t.to_string(), r.to_string()])?;
        }
    }
    curves.flush()?;
    println!(
        "{}: PR {:.1}  NPR {:.1}  SR {:.1}  F {:.1}  SSIM {:.4}",
        pipe.method.label(),
        e.report.pr * 100.0,
        e.report.npr * 100.0,
        e.report.sr_auc * 100.0,
        e.report.f_score * 100.0,
        e.ssim_mean
    );
    Ok(())
}

pub fn ablate(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let scenarios = eval_set(&cfg)?;
    if scenarios.is_empty() {
        return Err(GmmtError::data("empty scenario set"));
    }
    let plan = cfg.step_plan()?;
    let mut rows = Vec::with_capacity(Method::ALL.len());
    for m in Method::ALL {
        let pipe = fit(&cfg, m)?;
        let e = evaluate_pipeline(&pipe, &scenarios, &plan, cfg.seed, &cfg.metrics)?;
        println!("{}: PR {:.1}  SR {:.1}  fused mse {:.4}", m.label(), e.report.pr * 100.0, e.report.sr_auc * 100.0, e.fused_mse);
        rows.push((m, e));
    }
    let path = out_dir(&cfg)?.join("ablation.csv");
    write_ablation_csv(csv_file(&path)?, &rows)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn whole(axis: Axis, v: f64) -> Result<usize> {
    if v < 1.0 || v.fract() != 0.0 || v > u32::MAX as f64 {
        return Err(GmmtError::config(format!("{} values must be positive integers, got {v}", axis.name())));
    }
    Ok(v as usize)
}

pub fn sweep(c: &Common, axis: Axis, values: Option<Vec<f64>>) -> Result<()> {
    let cfg = load_config(c)?;
    let values = values.unwrap_or_else(|| axis.default_values());
    let scenarios = eval_set(&cfg)?;
    let mode = cfg.trainer.mode;
    let shared = match axis {
        Axis::Steps => Some(fit(&cfg, mode)?),
        _ => None,
    };
    let rows = sweep_eval(axis, &values, &scenarios, cfg.seed, &cfg.metrics, |v| {
        let mut run = cfg.clone();
        match axis {
            Axis::Steps => run.schedule.sampler_steps = whole(axis, v)?,
            Axis::Lambda => run.trainer.lambda = v,
            Axis::Blocks => run.denoiser.blocks = whole(axis, v)?,
        }
        run.validate()?;
        let pipe = match &shared {
            Some(p) => p.clone(),
            None => fit(&run, mode)?,
        };
        println!("{} = {v}", axis.name());
        Ok((pipe, StepPlan::new(run.schedule.timesteps, run.schedule.sampler_steps)?))
    })?;
    let path = out_dir(&cfg)?.join(format!("sweep_{}.csv", axis.name()));
    write_report_csv(csv_file(&path)?, &rows)?;
    println!("wrote {}", path.display());
    Ok(())
}

pub fn goldens(c: &Common, force: bool) -> Result<()> {
    if !force {
        return Err(GmmtError::config("goldens overwrites the reference files; pass --force to proceed"));
    }
    let dir = c.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_GOLDEN_DIR));
    for p in write_goldens(&dir)? {
        println!("wrote {}", p.display());
    }
    Ok(())
}
