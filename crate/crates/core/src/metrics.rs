//! Test-loss estimation, loss normalization, the NSR transition statistic,
//! phase labels, excess over dMMSE, and context-length / radius curves.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::Scalar;
use crate::baselines::{bayes_cap_mc, bayes_cap_noiseless, dmmse, ols, BayesOptions, RegressionContext};
use crate::episode::{sample_episode, sample_episode_for_task, Episode, InputSampler};
use crate::error::{domain, Error, Result};
use crate::model::ModelParams;
use crate::rng::RngStream;
use crate::sphere::{dot, great_circle_interpolate, project_to_cap, CapSpec, SphereRegion};
use crate::stats::mean_stderr;
use crate::tasks::{LinearTask, Task, TaskCount, TaskPool, TaskPrior, TaskSource};

/// Episodes evaluated per model forward call.
const EVAL_CHUNK: usize = 256;

/// Anything that estimates `y_k` from the first `k - 1` pairs and `x_k`.
pub trait Predictor {
    fn name(&self) -> String;

    /// Estimates of `y_k` (1-based `k`) for every episode.
    fn predict_at(&self, episodes: &[Episode], k: usize, rng: &mut RngStream) -> Result<Vec<f64>>;
}

fn truncated(ep: &Episode, k: usize) -> Episode {
    let mut out = ep.clone();
    out.xs.truncate(k * ep.dim);
    out.ys.truncate(k);
    out.noise.truncate(k);
    out
}

fn check_position(ep: &Episode, k: usize) -> Result<()> {
    if k == 0 || k > ep.context_length() {
        return Err(domain(format!("position {k} outside 1..={}", ep.context_length())));
    }
    Ok(())
}

impl<T: Scalar> Predictor for ModelParams<T> {
    fn name(&self) -> String {
        "transformer".into()
    }

    fn predict_at(&self, episodes: &[Episode], k: usize, _rng: &mut RngStream) -> Result<Vec<f64>> {
        for ep in episodes {
            check_position(ep, k)?;
        }
        let eps: Vec<Episode> = if episodes.iter().all(|e| e.context_length() == k) {
            episodes.to_vec()
        } else {
            episodes.iter().map(|e| truncated(e, k)).collect()
        };
        self.predict_final_many(&eps, EVAL_CHUNK)
    }
}

/// Reference predictors expressed through an estimate `w_hat` (except
/// `Oracle`, which evaluates the true task's noiseless label).
#[derive(Clone, Debug)]
pub enum Baseline {
    Zero,
    Fixed(Vec<f64>),
    Oracle,
    Ols,
    Dmmse(TaskPool),
    BayesMc { cap: CapSpec, options: BayesOptions },
    /// Best in-cap estimate: the true task projected onto the cap.
    CapBound(CapSpec),
}

impl Baseline {
    /// `w_hat` for position `k` of `ep`.
    pub fn estimate(&self, ep: &Episode, k: usize, rng: &mut RngStream) -> Result<Vec<f64>> {
        let ctx = || RegressionContext::from_episode(ep, k - 1, ep.task.noise_var());
        Ok(match self {
            Self::Zero => vec![0.0; ep.dim],
            Self::Fixed(w) => w.clone(),
            Self::Oracle => linear_weights(&ep.task)?.to_vec(),
            Self::Ols => ols(&ctx()?),
            Self::Dmmse(pool) => dmmse(pool, &ctx()?)?,
            Self::BayesMc { cap, options } => {
                let ctx = ctx()?;
                if ctx.noise_var == 0.0 {
                    bayes_cap_noiseless(cap, &ctx)?
                } else {
                    bayes_cap_mc(cap, &ctx, *options, rng)?.w
                }
            }
            Self::CapBound(cap) => project_to_cap(linear_weights(&ep.task)?, cap)?.point,
        })
    }
}

fn linear_weights(task: &Task) -> Result<&[f64]> {
    task.weights().ok_or_else(|| domain("predictor needs a linear or logistic task"))
}

impl Predictor for Baseline {
    fn name(&self) -> String {
        match self {
            Self::Zero => "zero",
            Self::Fixed(_) => "fixed",
            Self::Oracle => "oracle",
            Self::Ols => "ols",
            Self::Dmmse(_) => "dmmse",
            Self::BayesMc { .. } => "bayes_mc",
            Self::CapBound(_) => "cap_bound",
        }
        .into()
    }

    fn predict_at(&self, episodes: &[Episode], k: usize, rng: &mut RngStream) -> Result<Vec<f64>> {
        episodes
            .iter()
            .map(|ep| {
                check_position(ep, k)?;
                if let Self::Oracle = self {
                    return ep.task.mean_label(ep.x(k - 1));
                }
                Ok(dot(&self.estimate(ep, k, rng)?, ep.x(k - 1)))
            })
            .collect()
    }
}

/// Monte-Carlo estimate of a squared-error loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossEstimate {
    pub raw_loss: f64,
    /// `raw_loss - noise_var`, the error above the label-noise floor.
    pub excess_loss: f64,
    pub stderr: f64,
    pub n_episodes: usize,
}

impl LossEstimate {
    pub fn from_errors(errors: &[f64], noise_var: f64) -> Self {
        let (mean, se) = mean_stderr(errors);
        Self { raw_loss: mean, excess_loss: mean - noise_var, stderr: se, n_episodes: errors.len() }
    }
}

/// Draws `n_episodes` episodes of length `n` in chunks.
pub fn sample_episodes(
    rng: &mut RngStream,
    source: &TaskSource,
    inputs: &InputSampler,
    n: usize,
    n_episodes: usize,
) -> Result<Vec<Episode>> {
    (0..n_episodes).map(|_| sample_episode(rng, source, inputs, n)).collect()
}

/// Squared errors at position `k` of each episode.
pub fn squared_errors(
    predictor: &dyn Predictor,
    episodes: &[Episode],
    k: usize,
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(episodes.len());
    for chunk in episodes.chunks(EVAL_CHUNK) {
        let preds = predictor.predict_at(chunk, k, rng)?;
        out.extend(chunk.iter().zip(preds).map(|(ep, p)| (p - ep.ys[k - 1]).powi(2)));
    }
    Ok(out)
}

/// Final-position test loss over fresh episodes. Episodes are drawn from
/// `rng` and predictor randomness from a forked stream, so two predictors
/// evaluated with equal `rng` states see identical episodes.
pub fn test_loss(
    predictor: &dyn Predictor,
    source: &TaskSource,
    inputs: &InputSampler,
    n: usize,
    n_episodes: usize,
    rng: &mut RngStream,
) -> Result<LossEstimate> {
    if n_episodes == 0 {
        return Err(domain("need at least one evaluation episode"));
    }
    let mut pred_rng = rng.fork(0x9e3);
    let episodes = sample_episodes(rng, source, inputs, n, n_episodes)?;
    let errs = squared_errors(predictor, &episodes, n, &mut pred_rng)?;
    Ok(LossEstimate::from_errors(&errs, episodes[0].task.noise_var()))
}

/// Largest squared distance between two points of a cap of half-angle `phi`
/// on the unit sphere: `2 - 2 cos(min(2 phi, pi))`.
pub fn cap_diameter_sq(phi: f64) -> f64 {
    2.0 - 2.0 * (2.0 * phi).min(PI).cos()
}

pub fn normalize_in_dist(loss: f64, phi: f64) -> Result<f64> {
    if phi < 1e-6 {
        return Err(domain(format!("cap half-angle {phi} too small to normalize by")));
    }
    if !(loss >= 0.0) {
        return Err(domain(format!("loss must be >= 0, got {loss}")));
    }
    Ok(loss / cap_diameter_sq(phi))
}

pub fn normalize_ood(loss: f64) -> f64 {
    loss / 4.0
}

/// Population standard deviation over mean of per-angle losses.
pub fn nsr(losses: &[f64]) -> Result<f64> {
    if losses.len() < 2 {
        return Err(domain("NSR needs at least two test angles"));
    }
    let n = losses.len() as f64;
    let mean = losses.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return Err(domain("NSR undefined for all-zero losses"));
    }
    let var = losses.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / n;
    Ok(var.sqrt() / mean)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    #[serde(rename = "IWL")]
    Iwl,
    #[serde(rename = "InDistICL")]
    InDistIcl,
    #[serde(rename = "OODICL")]
    OodIcl,
}

impl Phase {
    pub fn label(self) -> &'static str {
        match self {
            Self::Iwl => "IWL",
            Self::InDistIcl => "InDistICL",
            Self::OodIcl => "OODICL",
        }
    }
}

pub const PHASE_THRESHOLD: f64 = 1e-2;

pub fn classify_phase(in_dist_norm: f64, ood_norm: f64, threshold: f64) -> Phase {
    if in_dist_norm >= threshold {
        Phase::Iwl
    } else if ood_norm >= threshold {
        Phase::InDistIcl
    } else {
        Phase::OodIcl
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseCell {
    pub phi: f64,
    pub n_tasks: TaskCount,
    pub in_dist_loss: f64,
    pub ood_loss: f64,
    pub phase: Phase,
}

impl PhaseCell {
    pub fn new(phi: f64, n_tasks: TaskCount, in_dist_loss: f64, ood_loss: f64) -> Self {
        let phase = classify_phase(in_dist_loss, ood_loss, PHASE_THRESHOLD);
        Self { phi, n_tasks, in_dist_loss, ood_loss, phase }
    }
}

pub const NSR_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    /// Smallest grid angle from which NSR stays below threshold.
    pub phi_c: Option<f64>,
    /// Grid angles at which NSR moves from below to at-or-above threshold,
    /// i.e. the crossings that make the profile non-monotone.
    pub reverse_crossings: Vec<f64>,
}

/// `nsr_by_phi` must be sorted by angle.
pub fn detect_transition(nsr_by_phi: &[(f64, f64)], threshold: f64) -> Result<Transition> {
    if nsr_by_phi.windows(2).any(|w| w[0].0 >= w[1].0) {
        return Err(domain("NSR grid must be strictly ascending in phi"));
    }
    let mut phi_c = None;
    let mut reverse_crossings = Vec::new();
    let mut prev_below = false;
    for &(phi, v) in nsr_by_phi {
        let below = v < threshold;
        if below && phi_c.is_none() {
            phi_c = Some(phi);
        }
        if !below {
            if prev_below {
                reverse_crossings.push(phi);
            }
            phi_c = None;
        }
        prev_below = below;
    }
    Ok(Transition { phi_c, reverse_crossings })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterpPoint {
    pub alpha: f64,
    pub dmmse_loss: f64,
    pub model_loss: f64,
}

/// `D = max_alpha (model_loss - dmmse_loss)`: negative exactly when the model
/// beats dMMSE at every point of the path. Returns `(D, D / M(phi))`.
pub fn excess_over_dmmse(points: &[InterpPoint], phi: f64) -> Result<(f64, f64)> {
    let d = points
        .iter()
        .map(|p| p.model_loss - p.dmmse_loss)
        .fold(f64::NEG_INFINITY, f64::max);
    if !d.is_finite() {
        return Err(domain("excess over dMMSE needs at least one path point"));
    }
    Ok((d, d / cap_diameter_sq(phi.max(1e-6))))
}

/// Final-position losses of `model` and of dMMSE on `pool`, for linear tasks
/// along the great circle from pool task `a` to pool task `b`.
#[allow(clippy::too_many_arguments)]
pub fn dmmse_interpolation(
    model: &dyn Predictor,
    pool: &TaskPool,
    a: usize,
    b: usize,
    alphas: &[f64],
    inputs: &InputSampler,
    n: usize,
    n_episodes: usize,
    rng: &mut RngStream,
) -> Result<Vec<InterpPoint>> {
    let tasks = pool.tasks();
    let (ta, tb) = (tasks.get(a), tasks.get(b));
    let (Some(ta), Some(tb)) = (ta, tb) else {
        return Err(domain(format!("pool indices {a}, {b} out of range {}", pool.len())));
    };
    let noise_var = ta.noise_var();
    let (wa, wb) = (linear_weights(ta)?, linear_weights(tb)?);
    let baseline = Baseline::Dmmse(pool.clone());
    let mut pred_rng = rng.fork(0xd3);
    alphas
        .iter()
        .map(|&alpha| {
            let w = great_circle_interpolate(wa, wb, alpha)?;
            let task = Task::Linear(LinearTask { w, noise_var });
            let eps = (0..n_episodes)
                .map(|_| sample_episode_for_task(rng, task.clone(), inputs, n))
                .collect::<Result<Vec<_>>>()?;
            let dm = mean_stderr(&squared_errors(&baseline, &eps, n, &mut pred_rng)?).0;
            let md = mean_stderr(&squared_errors(model, &eps, n, &mut pred_rng)?).0;
            Ok(InterpPoint { alpha, dmmse_loss: dm, model_loss: md })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextPoint {
    pub k: usize,
    pub model: LossEstimate,
    pub ols: LossEstimate,
}

/// Loss at each position `k` for `model` and for OLS fitted on the first
/// `k - 1` pairs, on shared episodes.
pub fn context_length_curve(
    model: &dyn Predictor,
    source: &TaskSource,
    inputs: &InputSampler,
    n: usize,
    ks: &[usize],
    n_episodes: usize,
    rng: &mut RngStream,
) -> Result<Vec<ContextPoint>> {
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > n) {
        return Err(domain(format!("context length {k} outside 1..={n}")));
    }
    let mut pred_rng = rng.fork(0xc7);
    let episodes = sample_episodes(rng, source, inputs, n, n_episodes)?;
    let noise_var = episodes.first().map_or(0.0, |e| e.task.noise_var());
    ks.iter()
        .map(|&k| {
            let m = squared_errors(model, &episodes, k, &mut pred_rng)?;
            let o = squared_errors(&Baseline::Ols, &episodes, k, &mut pred_rng)?;
            Ok(ContextPoint {
                k,
                model: LossEstimate::from_errors(&m, noise_var),
                ols: LossEstimate::from_errors(&o, noise_var),
            })
        })
        .collect()
}

pub const DEFAULT_RADII: [f64; 6] = [0.25, 0.5, 0.75, 1.0, 1.25, 1.5];

/// Linear-task test loss with the cap's radius swept over `radii`.
#[allow(clippy::too_many_arguments)]
pub fn radius_curve(
    predictor: &dyn Predictor,
    cap: &CapSpec,
    radii: &[f64],
    noise_var: f64,
    inputs: &InputSampler,
    n: usize,
    n_episodes: usize,
    rng: &mut RngStream,
) -> Result<Vec<(f64, LossEstimate)>> {
    radii
        .iter()
        .map(|&r| {
            let prior = TaskPrior::Linear { region: SphereRegion::Cap(cap.clone().with_radius(r)?), noise_var };
            let source = TaskSource::continuous(&prior)?;
            Ok((r, test_loss(predictor, &source, inputs, n, n_episodes, rng)?))
        })
        .collect()
}

/// One CSV row: a predictor's loss on one test band for one training cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub experiment: String,
    pub run_id: String,
    pub predictor: String,
    pub family: String,
    pub dim: usize,
    pub n_layers: usize,
    /// Degrees.
    pub train_phi: f64,
    /// Start of the test band, degrees.
    pub test_delta: f64,
    pub band_width: f64,
    pub n_tasks: TaskCount,
    pub seed: u64,
    pub context_length: usize,
    pub radius: f64,
    pub noise_var: f64,
    pub raw_loss: f64,
    pub excess_loss: f64,
    pub normalized_loss: f64,
    pub n_episodes: usize,
    pub stderr: f64,
}

impl EvalRecord {
    /// Normalizes the excess loss: by the training cap's diameter when the
    /// test band lies inside the training cap, otherwise by 4.
    pub fn normalized(train_phi_deg: f64, test_delta_deg: f64, band_width_deg: f64, excess_loss: f64) -> Result<f64> {
        let loss = excess_loss.max(0.0);
        if test_delta_deg + band_width_deg <= train_phi_deg + 1e-9 && train_phi_deg < 180.0 {
            normalize_in_dist(loss, train_phi_deg.to_radians())
        } else {
            Ok(normalize_ood(loss))
        }
    }
}

pub const EVAL_CSV_HEADER: [&str; 19] = [
    "experiment",
    "run_id",
    "predictor",
    "family",
    "dim",
    "n_layers",
    "train_phi",
    "test_delta",
    "band_width",
    "n_tasks",
    "seed",
    "context_length",
    "radius",
    "noise_var",
    "raw_loss",
    "excess_loss",
    "normalized_loss",
    "n_episodes",
    "stderr",
];

pub fn write_records(path: &std::path::Path, records: &[EvalRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if records.is_empty() {
        w.write_record(EVAL_CSV_HEADER)?;
    }
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records(path: &std::path::Path) -> Result<Vec<EvalRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}
