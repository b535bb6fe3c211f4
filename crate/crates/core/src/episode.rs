//! Episodes of `(x, y)` pairs and their interleaved token layout.
//!
//! An episode of length `n` in `R^d` becomes a `2n x d` token matrix: row
//! `2k` (zero-based) holds `x_k`, row `2k + 1` holds `(y_k, 0, ..., 0)`.
//! The model reads its estimate of `y_k` off the output at row `2k`.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::rng::RngStream;
use crate::sphere::{dot, BandSpec, CapSpec, RegionSampler, SphereRegion};
use crate::tasks::{Task, TaskSource};

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    /// `n x d`, row-major.
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    /// Additive label noise drawn for each `y`.
    pub noise: Vec<f64>,
    pub task: Task,
    pub dim: usize,
}

impl Episode {
    pub fn context_length(&self) -> usize {
        self.ys.len()
    }

    pub fn x(&self, k: usize) -> &[f64] {
        &self.xs[k * self.dim..(k + 1) * self.dim]
    }

    /// Recomputes labels from the task, the inputs and the recorded noise.
    pub fn relabelled(&self) -> Result<Vec<f64>> {
        (0..self.context_length())
            .map(|k| Ok(self.task.mean_label(self.x(k))? + self.noise[k]))
            .collect()
    }
}

/// Distribution of the inputs `x_i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputDistribution {
    GaussianIso,
    CapRestricted { cap: CapSpec },
    BandRestricted { band: BandSpec },
}

impl InputDistribution {
    pub fn sampler(&self, dim: usize) -> Result<InputSampler> {
        let region = match self {
            Self::GaussianIso => None,
            Self::CapRestricted { cap } => Some(SphereRegion::Cap(cap.clone())),
            Self::BandRestricted { band } => Some(SphereRegion::Band(band.clone())),
        };
        if let Some(r) = &region {
            if r.dim() != dim {
                return Err(Error::Dimension { expected: dim, got: r.dim() });
            }
        }
        Ok(InputSampler {
            dim,
            region: region.map(|r| r.sampler()).transpose()?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct InputSampler {
    dim: usize,
    region: Option<RegionSampler>,
}

impl InputSampler {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sample(&self, rng: &mut RngStream) -> Vec<f64> {
        match &self.region {
            None => rng.normal_vec(self.dim),
            Some(r) => r.sample(rng),
        }
    }
}

/// One episode with a task drawn from `source`.
pub fn sample_episode(
    rng: &mut RngStream,
    source: &TaskSource,
    inputs: &InputSampler,
    n: usize,
) -> Result<Episode> {
    let task = source.draw(rng);
    sample_episode_for_task(rng, task, inputs, n)
}

pub fn sample_episode_for_task(
    rng: &mut RngStream,
    task: Task,
    inputs: &InputSampler,
    n: usize,
) -> Result<Episode> {
    if n == 0 {
        return Err(domain("episodes need at least one example"));
    }
    let d = inputs.dim();
    if task.input_dim() != d {
        return Err(Error::Dimension { expected: d, got: task.input_dim() });
    }
    let mut xs = Vec::with_capacity(n * d);
    let mut ys = Vec::with_capacity(n);
    let mut noise = Vec::with_capacity(n);
    for _ in 0..n {
        let x = inputs.sample(rng);
        let (y, eps) = task.label(&x, rng)?;
        xs.extend_from_slice(&x);
        ys.push(y);
        noise.push(eps);
    }
    Ok(Episode { xs, ys, noise, task, dim: d })
}

/// `2n x d` interleaved token matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

pub fn tokenize(ep: &Episode) -> TokenSequence {
    let (n, d) = (ep.context_length(), ep.dim);
    let mut data = vec![0.0; 2 * n * d];
    for k in 0..n {
        data[2 * k * d..(2 * k + 1) * d].copy_from_slice(ep.x(k));
        data[(2 * k + 1) * d] = ep.ys[k];
    }
    TokenSequence { rows: 2 * n, dim: d, data }
}

/// Inverse of [`tokenize`] on its image: returns `(xs, ys)`.
pub fn detokenize(tokens: &TokenSequence) -> Result<(Vec<f64>, Vec<f64>)> {
    if !tokens.rows.is_multiple_of(2) || tokens.data.len() != tokens.rows * tokens.dim {
        return Err(domain("token matrix must have an even number of full rows"));
    }
    let d = tokens.dim;
    let n = tokens.rows / 2;
    let mut xs = Vec::with_capacity(n * d);
    let mut ys = Vec::with_capacity(n);
    for k in 0..n {
        xs.extend_from_slice(&tokens.data[2 * k * d..(2 * k + 1) * d]);
        ys.push(tokens.data[(2 * k + 1) * d]);
    }
    Ok((xs, ys))
}

/// A batch of episodes with the `(batch, 2n, d)` token tensor and the
/// `(batch, n)` targets, both row-major.
#[derive(Clone, Debug)]
pub struct Batch {
    pub episodes: Vec<Episode>,
    pub context_length: usize,
    pub dim: usize,
    pub tokens: Vec<f64>,
    pub targets: Vec<f64>,
}

impl Batch {
    pub fn from_episodes(episodes: Vec<Episode>) -> Result<Self> {
        let first = episodes.first().ok_or_else(|| domain("empty batch"))?;
        let (n, d) = (first.context_length(), first.dim);
        let mut tokens = Vec::with_capacity(episodes.len() * 2 * n * d);
        let mut targets = Vec::with_capacity(episodes.len() * n);
        for ep in &episodes {
            if ep.context_length() != n || ep.dim != d {
                return Err(domain("episodes in a batch must share length and dimension"));
            }
            tokens.extend(tokenize(ep).data);
            targets.extend_from_slice(&ep.ys);
        }
        Ok(Self { episodes, context_length: n, dim: d, tokens, targets })
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    /// `(batch, 2n, d)`.
    pub fn shape(&self) -> [usize; 3] {
        [self.len(), 2 * self.context_length, self.dim]
    }
}

pub fn make_batch(
    rng: &mut RngStream,
    source: &TaskSource,
    inputs: &InputSampler,
    batch_size: usize,
    n: usize,
) -> Result<Batch> {
    if batch_size == 0 {
        return Err(domain("batch size must be >= 1"));
    }
    let episodes = (0..batch_size)
        .map(|_| sample_episode(rng, source, inputs, n))
        .collect::<Result<Vec<_>>>()?;
    Batch::from_episodes(episodes)
}

/// Replaces every `x_i` by its projection `(x_i . v) v` onto the pole.
///
/// Labels are kept as generated from the original inputs unless `relabel`
/// is set, in which case they are recomputed from the projected inputs with
/// the recorded noise.
pub fn zero_perpendicular(ep: &Episode, pole: &[f64], relabel: bool) -> Result<Episode> {
    if pole.len() != ep.dim {
        return Err(Error::Dimension { expected: ep.dim, got: pole.len() });
    }
    let mut out = ep.clone();
    for k in 0..ep.context_length() {
        let c = dot(ep.x(k), pole);
        for (j, p) in pole.iter().enumerate() {
            out.xs[k * ep.dim + j] = c * p;
        }
    }
    if relabel {
        out.ys = out.relabelled()?;
    }
    Ok(out)
}
