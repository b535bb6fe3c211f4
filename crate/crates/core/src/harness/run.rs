use std::f64::consts::PI;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{ExperimentConfig, ExperimentKind};
use crate::episode::{InputDistribution, InputSampler};
use crate::error::{Error, Result};
use crate::metrics::{
    context_length_curve, dmmse_interpolation, radius_curve, test_loss, Baseline, EvalRecord, LossEstimate, Predictor,
};
use crate::model::{write_loss_trace, Checkpoint, DataSpec, ModelParams, PerpendicularProbe, TrainSchedule, Trainer};
use crate::rng::RngStream;
use crate::sphere::{unit_axis, BandSpec, CapSpec};
use crate::tasks::{make_task_pool, TaskCount, TaskFamily, TaskPool, TaskPrior, TaskSource};

const POOL_STREAM: u64 = 0x9001;
const EVAL_STREAM: u64 = 0xE7A1;
const SNAPSHOT_STREAM: u64 = 0x5A9;

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const TRACE_FILE: &str = "loss_trace.csv";
pub const EVAL_FILE: &str = "eval.csv";
pub const SNAPSHOT_FILE: &str = "snapshots.csv";
pub const INTERP_FILE: &str = "interp.csv";

/// One training run of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub id: String,
    /// Degrees.
    pub phi: f64,
    pub n_tasks: TaskCount,
    pub dim: usize,
    pub n_layers: usize,
    pub noise_var: f64,
    pub family: TaskFamily,
    pub seed: u64,
    /// Training inputs projected onto the cap pole (perpendicular probe).
    pub zeroed: bool,
}

impl RunSpec {
    /// Seed for this run's streams, derived from its id.
    pub fn run_seed(&self) -> u64 {
        let h = Sha256::digest(self.id.as_bytes());
        u64::from_le_bytes(h[..8].try_into().unwrap())
    }
}

pub fn expand_runs(cfg: &ExperimentConfig) -> Vec<RunSpec> {
    let g = &cfg.grids;
    let variants: &[bool] = if cfg.kind == ExperimentKind::Spec2Probe { &[false, true] } else { &[false] };
    let mut out = Vec::new();
    for &family in &g.families {
        for &noise_var in &g.noise_var {
            for dim in cfg.dims() {
                for n_layers in cfg.layers() {
                    for &n_tasks in &g.n_tasks {
                        for &phi in &g.phi {
                            for &seed in &cfg.seeds {
                                for &zeroed in variants {
                                    let id = format!(
                                        "{}_phi{phi}_N{n_tasks}_d{dim}_L{n_layers}_noise{noise_var}_seed{seed}{}",
                                        family.name(),
                                        if zeroed { "_zeroed" } else { "" }
                                    );
                                    out.push(RunSpec { id, phi, n_tasks, dim, n_layers, noise_var, family, seed, zeroed });
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub checkpoint: PathBuf,
    pub outputs: Vec<PathBuf>,
    pub final_loss_slope: f64,
}

fn gaussian(dim: usize) -> Result<InputSampler> {
    InputDistribution::GaussianIso.sampler(dim)
}

/// Inputs on the unit sphere with polar angle in `[lo, hi]` (radians).
fn angular_inputs(dim: usize, lo: f64, hi: f64) -> Result<InputSampler> {
    let dist = if lo <= 0.0 {
        InputDistribution::CapRestricted { cap: CapSpec::around_e1(dim, hi)? }
    } else {
        InputDistribution::BandRestricted { band: BandSpec::around_e1(dim, lo, hi - lo)? }
    };
    dist.sampler(dim)
}

/// Task prior and input sampler for angles `[lo, hi]` (radians). In the
/// data-diversity experiment the angles restrict the inputs and tasks cover
/// the whole sphere.
fn setting(cfg: &ExperimentConfig, spec: &RunSpec, lo: f64, hi: f64) -> Result<(TaskPrior, InputSampler)> {
    let d = spec.dim;
    if cfg.kind == ExperimentKind::XDiversity {
        let prior = TaskPrior::from_angles(spec.family, d, 0.0, PI, spec.noise_var, cfg.task.radius)?;
        return Ok((prior, angular_inputs(d, lo, hi)?));
    }
    Ok((TaskPrior::from_angles(spec.family, d, lo, hi, spec.noise_var, cfg.task.radius)?, gaussian(d)?))
}

fn training_pool(cfg: &ExperimentConfig, spec: &RunSpec) -> Result<Option<TaskPool>> {
    let TaskCount::Finite(n) = spec.n_tasks else { return Ok(None) };
    let (prior, _) = setting(cfg, spec, 0.0, spec.phi.to_radians())?;
    Ok(Some(make_task_pool(&mut RngStream::new(spec.run_seed(), POOL_STREAM), &prior, n)?))
}

fn data_spec(cfg: &ExperimentConfig, spec: &RunSpec) -> Result<DataSpec> {
    let (prior, inputs) = setting(cfg, spec, 0.0, spec.phi.to_radians())?;
    let source = match training_pool(cfg, spec)? {
        Some(pool) => TaskSource::Pool(pool),
        None => TaskSource::continuous(&prior)?,
    };
    Ok(DataSpec {
        source,
        inputs,
        context_length: cfg.task.context_length,
        batch_size: cfg.schedule.batch_size,
        probe: spec
            .zeroed
            .then(|| PerpendicularProbe { pole: unit_axis(spec.dim, 0), relabel: cfg.eval.probe_relabel }),
    })
}

/// Slope of a least-squares line through the last tenth of the trace.
pub fn final_loss_slope(trace: &[f64]) -> f64 {
    let m = (trace.len() / 10).max(2).min(trace.len());
    if m < 2 {
        return 0.0;
    }
    let tail = &trace[trace.len() - m..];
    let n = m as f64;
    let mx = (n - 1.0) / 2.0;
    let my = tail.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, y) in tail.iter().enumerate() {
        let dx = i as f64 - mx;
        sxy += dx * (y - my);
        sxx += dx * dx;
    }
    sxy / sxx
}

struct Cell<'a> {
    cfg: &'a ExperimentConfig,
    spec: &'a RunSpec,
}

impl Cell<'_> {
    fn record(&self, predictor: &str, delta: f64, width: f64, k: usize, radius: f64, est: &LossEstimate) -> Result<EvalRecord> {
        // With tasks over the whole sphere there is no task cap to normalize by.
        let norm_phi = if self.cfg.kind == ExperimentKind::XDiversity { 180.0 } else { self.spec.phi };
        Ok(EvalRecord {
            experiment: self.cfg.name(),
            run_id: self.spec.id.clone(),
            predictor: predictor.to_string(),
            family: self.spec.family.name().to_string(),
            dim: self.spec.dim,
            n_layers: self.spec.n_layers,
            train_phi: self.spec.phi,
            test_delta: delta,
            band_width: width,
            n_tasks: self.spec.n_tasks,
            seed: self.spec.seed,
            context_length: k,
            radius,
            noise_var: self.spec.noise_var,
            raw_loss: est.raw_loss,
            excess_loss: est.excess_loss,
            normalized_loss: EvalRecord::normalized(norm_phi, delta, width, est.excess_loss)?,
            n_episodes: est.n_episodes,
            stderr: est.stderr,
        })
    }

    fn baselines(&self) -> Result<Vec<Baseline>> {
        let linear = self.spec.family == TaskFamily::Linear && self.cfg.kind != ExperimentKind::XDiversity;
        if !self.cfg.eval.baselines || !linear {
            return Ok(Vec::new());
        }
        let cap = CapSpec::around_e1(self.spec.dim, self.spec.phi.to_radians())?;
        let mut out = vec![Baseline::Ols, Baseline::CapBound(cap)];
        if let Some(pool) = training_pool(self.cfg, self.spec)? {
            out.push(Baseline::Dmmse(pool));
        }
        Ok(out)
    }

    /// Every predictor on every test band of the delta grid.
    fn band_records(&self, model: &ModelParams<f32>, n_episodes: usize, rng: &RngStream) -> Result<Vec<EvalRecord>> {
        let g = &self.cfg.grids;
        let n = self.cfg.task.context_length;
        let baselines = self.baselines()?;
        let mut out = Vec::new();
        for (i, &delta) in g.delta.iter().enumerate() {
            let (lo, hi) = (delta.to_radians(), (delta + g.band_width).to_radians());
            let (prior, inputs) = setting(self.cfg, self.spec, lo, hi)?;
            let source = TaskSource::continuous(&prior)?;
            let band_rng = rng.fork(i as u64);
            let mut predictors: Vec<&dyn Predictor> = vec![model];
            predictors.extend(baselines.iter().map(|b| b as &dyn Predictor));
            for p in predictors {
                // Same stream per band: every predictor sees the same episodes.
                let est = test_loss(p, &source, &inputs, n, n_episodes, &mut band_rng.clone())?;
                out.push(self.record(&p.name(), delta, g.band_width, n, self.cfg.task.radius, &est)?);
            }
        }
        Ok(out)
    }
}

fn write_snapshot(path: &Path, step: u64, records: &[EvalRecord]) -> Result<()> {
    let new = !path.exists();
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::Writer::from_writer(file);
    if new {
        w.write_record(["step", "predictor", "test_delta", "raw_loss", "stderr"])?;
    }
    for r in records {
        w.write_record([step.to_string(), r.predictor.clone(), r.test_delta.to_string(), r.raw_loss.to_string(), r.stderr.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn resume_or_new(cfg: &ExperimentConfig, spec: &RunSpec, ckpt_path: &Path) -> Result<Trainer> {
    let model = cfg.model.build(spec.n_layers, spec.dim, cfg.task.context_length);
    if ckpt_path.exists() {
        let ckpt = Checkpoint::load(ckpt_path)?;
        if ckpt.model == model && ckpt.optimizer == cfg.optimizer && ckpt.step <= cfg.schedule.steps {
            info!("{}: resuming from step {}", spec.id, ckpt.step);
            return Trainer::from_checkpoint(&ckpt);
        }
        info!("{}: ignoring incompatible checkpoint", spec.id);
    }
    let mut t = Trainer::new(&model, cfg.optimizer, spec.run_seed())?;
    t.extra = serde_json::to_value(spec)?;
    Ok(t)
}

/// Trains (or resumes) one run and writes its evaluation files into `dir`.
pub fn execute_run(cfg: &ExperimentConfig, spec: &RunSpec, dir: &Path) -> Result<RunResult> {
    fs::create_dir_all(dir)?;
    let ckpt_path = dir.join(CHECKPOINT_FILE);
    let data = data_spec(cfg, spec)?;
    let mut trainer = resume_or_new(cfg, spec, &ckpt_path)?;
    trainer.dump_dir = Some(dir.to_path_buf());
    let snapshot_path = dir.join(SNAPSHOT_FILE);
    if trainer.step_count() == 0 && snapshot_path.exists() {
        fs::remove_file(&snapshot_path)?;
    }
    let cell = Cell { cfg, spec };
    let schedule = TrainSchedule {
        steps: cfg.schedule.steps,
        eval_every: (cfg.schedule.eval_every > 0).then_some(cfg.schedule.eval_every),
        checkpoint_every: (cfg.schedule.checkpoint_every > 0).then_some(cfg.schedule.checkpoint_every),
        checkpoint_path: Some(ckpt_path.clone()),
    };
    let snap_rng = RngStream::new(spec.run_seed(), SNAPSHOT_STREAM);
    trainer.run(&data, &schedule, |t| {
        let recs = cell.band_records(&t.params, cfg.eval.snapshot_episodes, &snap_rng)?;
        let model_only: Vec<_> = recs.into_iter().filter(|r| r.predictor == "transformer").collect();
        write_snapshot(&snapshot_path, t.step_count(), &model_only)
    })?;
    trainer.checkpoint().save(&ckpt_path)?;
    let trace_path = dir.join(TRACE_FILE);
    write_loss_trace(&trace_path, &trainer.trace)?;

    let model = &trainer.params;
    let rng = RngStream::new(spec.run_seed(), EVAL_STREAM);
    let n = cfg.task.context_length;
    let n_eval = cfg.eval.n_episodes;
    let mut outputs = vec![trace_path];
    let records = match cfg.kind {
        ExperimentKind::Radius => {
            let cap = CapSpec::around_e1(spec.dim, spec.phi.to_radians())?;
            let inputs = gaussian(spec.dim)?;
            let mut out = Vec::new();
            for p in [model as &dyn Predictor, &Baseline::Zero] {
                let curve = radius_curve(p, &cap, &cfg.grids.radius, spec.noise_var, &inputs, n, n_eval, &mut rng.clone())?;
                for (r, est) in curve {
                    out.push(cell.record(&p.name(), 0.0, spec.phi, n, r, &est)?);
                }
            }
            out
        }
        ExperimentKind::ContextLength => {
            let (prior, inputs) = setting(cfg, spec, 0.0, spec.phi.to_radians())?;
            let source = TaskSource::continuous(&prior)?;
            let ks: Vec<usize> =
                if cfg.grids.context_k.is_empty() { (1..=n).collect() } else { cfg.grids.context_k.clone() };
            let curve = context_length_curve(model, &source, &inputs, n, &ks, n_eval, &mut rng.clone())?;
            let mut out = Vec::new();
            for p in curve {
                out.push(cell.record("transformer", 0.0, spec.phi, p.k, cfg.task.radius, &p.model)?);
                out.push(cell.record("ols", 0.0, spec.phi, p.k, cfg.task.radius, &p.ols)?);
            }
            out
        }
        _ => cell.band_records(model, n_eval, &rng)?,
    };
    if cfg.kind == ExperimentKind::DmmseInterp {
        let pool = training_pool(cfg, spec)?.ok_or_else(|| Error::Config("dmmse_interp needs a finite pool".into()))?;
        let pts = dmmse_interpolation(
            model,
            &pool,
            0,
            1,
            &cfg.grids.alpha,
            &gaussian(spec.dim)?,
            n,
            n_eval,
            &mut rng.fork(0x1e7),
        )?;
        let path = dir.join(INTERP_FILE);
        let mut w = csv::Writer::from_path(&path)?;
        for p in pts {
            w.serialize(p)?;
        }
        w.flush()?;
        outputs.push(path);
    }
    let eval_path = dir.join(EVAL_FILE);
    crate::metrics::write_records(&eval_path, &records)?;
    outputs.push(eval_path);
    if snapshot_path.exists() {
        outputs.push(snapshot_path);
    }
    Ok(RunResult { checkpoint: ckpt_path, outputs, final_loss_slope: final_loss_slope(&trainer.trace) })
}
