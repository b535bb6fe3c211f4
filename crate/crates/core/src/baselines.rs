//! Reference predictors: least squares, the discrete MMSE estimator over a
//! finite task pool, a Monte-Carlo posterior mean under the cap prior, and
//! the best-in-cap bound.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::episode::Episode;
use crate::rng::RngStream;
use crate::sphere::{angle_between, dot, norm, project_to_cap, CapSpec, SphereRegion};
use crate::tasks::TaskPool;

/// Singular values below this fraction of the largest are treated as zero.
pub const PINV_RCOND: f64 = 1e-10;

/// Observed `(x_i, y_i)` pairs and the label-noise variance.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressionContext {
    /// `k x d`, row-major.
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub dim: usize,
    pub noise_var: f64,
}

impl RegressionContext {
    pub fn new(xs: Vec<f64>, ys: Vec<f64>, dim: usize, noise_var: f64) -> Result<Self> {
        if dim == 0 || xs.len() != ys.len() * dim {
            return Err(Error::Shape {
                op: "regression_context",
                detail: format!("{} input values for {} labels in dimension {dim}", xs.len(), ys.len()),
            });
        }
        if !(noise_var >= 0.0) {
            return Err(domain(format!("noise variance must be >= 0, got {noise_var}")));
        }
        Ok(Self { xs, ys, dim, noise_var })
    }

    /// The first `k` pairs of an episode.
    pub fn from_episode(ep: &Episode, k: usize, noise_var: f64) -> Result<Self> {
        if k > ep.context_length() {
            return Err(domain(format!("prefix {k} longer than episode {}", ep.context_length())));
        }
        Self::new(ep.xs[..k * ep.dim].to_vec(), ep.ys[..k].to_vec(), ep.dim, noise_var)
    }

    pub fn len(&self) -> usize {
        self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ys.is_empty()
    }

    pub fn x(&self, i: usize) -> &[f64] {
        &self.xs[i * self.dim..(i + 1) * self.dim]
    }

    /// `sum_i (w . x_i - y_i)^2`.
    pub fn sse(&self, w: &[f64]) -> f64 {
        (0..self.len()).map(|i| (dot(w, self.x(i)) - self.ys[i]).powi(2)).sum()
    }
}

/// Minimum-norm least squares through the SVD pseudoinverse.
pub fn ols(ctx: &RegressionContext) -> Vec<f64> {
    let d = ctx.dim;
    if ctx.is_empty() {
        return vec![0.0; d];
    }
    let x = DMatrix::from_row_slice(ctx.len(), d, &ctx.xs);
    let y = DVector::from_column_slice(&ctx.ys);
    let svd = x.svd(true, true);
    let smax = svd.singular_values.max();
    if smax == 0.0 {
        return vec![0.0; d];
    }
    let w = svd.solve(&y, PINV_RCOND * smax).expect("both singular bases were computed");
    w.iter().copied().collect()
}

fn linear_weights(pool: &TaskPool) -> Result<Vec<&[f64]>> {
    pool.tasks()
        .iter()
        .map(|t| t.weights().ok_or_else(|| domain("dMMSE needs a pool of linear or logistic tasks")))
        .collect()
}

/// Index of the pool task with the smallest residual; lowest index on ties.
pub fn dmmse_index(pool: &TaskPool, ctx: &RegressionContext) -> Result<usize> {
    let ws = linear_weights(pool)?;
    let mut best = (0, f64::INFINITY);
    for (j, w) in ws.iter().enumerate() {
        if w.len() != ctx.dim {
            return Err(Error::Dimension { expected: ctx.dim, got: w.len() });
        }
        let r = ctx.sse(w);
        if r < best.1 {
            best = (j, r);
        }
    }
    Ok(best.0)
}

/// Posterior mean over a uniform prior on the pool. With zero noise this is
/// the minimum-residual task.
pub fn dmmse(pool: &TaskPool, ctx: &RegressionContext) -> Result<Vec<f64>> {
    let ws = linear_weights(pool)?;
    if ctx.noise_var == 0.0 {
        return Ok(ws[dmmse_index(pool, ctx)?].to_vec());
    }
    let logw: Vec<f64> = ws
        .iter()
        .map(|w| {
            if w.len() != ctx.dim {
                return Err(Error::Dimension { expected: ctx.dim, got: w.len() });
            }
            Ok(-ctx.sse(w) / (2.0 * ctx.noise_var))
        })
        .collect::<Result<_>>()?;
    let m = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = vec![0.0; ctx.dim];
    let mut total = 0.0;
    for (w, lw) in ws.iter().zip(&logw) {
        let p = (lw - m).exp();
        total += p;
        for (o, wi) in out.iter_mut().zip(w.iter()) {
            *o += p * wi;
        }
    }
    out.iter_mut().for_each(|o| *o /= total);
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BayesOptions {
    pub n_samples: usize,
    pub ess_floor: f64,
    pub max_samples: usize,
}

impl Default for BayesOptions {
    fn default() -> Self {
        Self { n_samples: 10_000, ess_floor: 10.0, max_samples: 10_000_000 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BayesEstimate {
    pub w: Vec<f64>,
    pub ess: f64,
    pub n_samples: usize,
    /// False when the effective sample size stayed under the floor even at
    /// the sample cap.
    pub reliable: bool,
}

/// Self-normalized importance sampling of the posterior mean with the cap
/// prior as proposal. The sample count doubles until the effective sample
/// size reaches the floor or the cap is hit.
pub fn bayes_cap_mc(
    spec: &CapSpec,
    ctx: &RegressionContext,
    options: BayesOptions,
    rng: &mut RngStream,
) -> Result<BayesEstimate> {
    if ctx.noise_var <= 0.0 {
        return Err(domain("bayes_cap_mc needs noise_var > 0; use bayes_cap_noiseless"));
    }
    if spec.dim != ctx.dim {
        return Err(Error::Dimension { expected: ctx.dim, got: spec.dim });
    }
    if options.n_samples < 1000 {
        return Err(domain(format!("need at least 1000 samples, got {}", options.n_samples)));
    }
    let sampler = SphereRegion::Cap(spec.clone()).sampler()?;
    let two_var = 2.0 * ctx.noise_var;
    // Running sums relative to the largest log-weight seen so far.
    let mut m = f64::NEG_INFINITY;
    let (mut s1, mut s2) = (0.0, 0.0);
    let mut acc = vec![0.0; ctx.dim];
    let mut drawn = 0;
    let mut target = options.n_samples;
    loop {
        while drawn < target {
            let w = sampler.sample(rng);
            let lw = -ctx.sse(&w) / two_var;
            if lw > m {
                let r = (m - lw).exp();
                s1 *= r;
                s2 *= r * r;
                acc.iter_mut().for_each(|a| *a *= r);
                m = lw;
            }
            let p = (lw - m).exp();
            s1 += p;
            s2 += p * p;
            for (a, wi) in acc.iter_mut().zip(&w) {
                *a += p * wi;
            }
            drawn += 1;
        }
        let ess = s1 * s1 / s2;
        if ess >= options.ess_floor || target >= options.max_samples {
            return Ok(BayesEstimate {
                w: acc.iter().map(|a| a / s1).collect(),
                ess,
                n_samples: drawn,
                reliable: ess >= options.ess_floor,
            });
        }
        target = (2 * target).min(options.max_samples);
    }
}

/// Zero-noise surrogate for the cap posterior mean: the OLS solution
/// projected onto the cap, defined once the system is determined (`k >= d`).
pub fn bayes_cap_noiseless(spec: &CapSpec, ctx: &RegressionContext) -> Result<Vec<f64>> {
    if ctx.len() < ctx.dim {
        return Err(domain(format!(
            "noiseless cap posterior undefined for {} observations in dimension {}",
            ctx.len(),
            ctx.dim
        )));
    }
    Ok(project_to_cap(&ols(ctx), spec)?.point)
}

/// Excess MSE of the best in-cap predictor for a unit target:
/// `2 - 2 cos(max(0, angle(w*, pole) - phi))`.
pub fn cap_bound_loss(spec: &CapSpec, w_star: &[f64]) -> Result<f64> {
    if (norm(w_star) - 1.0).abs() > 1e-9 {
        return Err(domain("cap_bound_loss expects a unit target"));
    }
    let gap = (angle_between(w_star, &spec.pole)? - spec.half_angle).max(0.0);
    Ok(2.0 - 2.0 * gap.cos())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Ols,
    Dmmse,
    BayesMc,
    CapBound,
}

impl BaselineKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Ols => "ols",
            Self::Dmmse => "dmmse",
            Self::BayesMc => "bayes_mc",
            Self::CapBound => "cap_bound",
        }
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Self::Ols, Self::Dmmse, Self::BayesMc, Self::CapBound]
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown estimator {s:?}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sphere::{sample_cap, unit_axis};
    use crate::tasks::{LinearTask, Task};
    use std::f64::consts::PI;

    fn gaussian_ctx(rng: &mut RngStream, w: &[f64], k: usize, noise_var: f64) -> RegressionContext {
        let d = w.len();
        let xs = rng.normal_vec(k * d);
        let ys = (0..k).map(|i| dot(w, &xs[i * d..(i + 1) * d]) + noise_var.sqrt() * rng.normal()).collect();
        RegressionContext::new(xs, ys, d, noise_var).unwrap()
    }

    fn linear_pool(ws: Vec<Vec<f64>>) -> TaskPool {
        TaskPool::from_tasks(ws.into_iter().map(|w| Task::Linear(LinearTask { w, noise_var: 0.0 })).collect()).unwrap()
    }

    #[test]
    fn ols_recovers_square_system() {
        let mut rng = RngStream::new(0, 0);
        let w = rng.normal_vec(10);
        let ctx = gaussian_ctx(&mut rng, &w, 10, 0.0);
        let w_hat = ols(&ctx);
        assert!(norm(&w_hat.iter().zip(&w).map(|(a, b)| a - b).collect::<Vec<_>>()) < 1e-8);
    }

    #[test]
    fn ols_minimum_norm_single_observation() {
        let ctx = RegressionContext::new(vec![1.0, 0.0, 0.0], vec![2.0], 3, 0.0).unwrap();
        assert_eq!(ols(&ctx).iter().map(|v| (v * 1e12).round() / 1e12).collect::<Vec<_>>(), vec![2.0, 0.0, 0.0]);
        let empty = RegressionContext::new(vec![], vec![], 3, 0.0).unwrap();
        assert_eq!(ols(&empty), vec![0.0; 3]);
    }

    #[test]
    fn ols_underdetermined_matches_ridge_limit() {
        let mut rng = RngStream::new(1, 0);
        for _ in 0..20 {
            let (k, d) = (1 + rng.index(6), 8);
            let xs = rng.normal_vec(k * d);
            let ys = rng.normal_vec(k);
            let ctx = RegressionContext::new(xs.clone(), ys.clone(), d, 0.0).unwrap();
            let w = ols(&ctx);
            // Ridge oracle in the dual: w = X^T (X X^T + lambda I)^{-1} y.
            let x = DMatrix::from_row_slice(k, d, &xs);
            let gram = &x * x.transpose() + DMatrix::identity(k, k) * 1e-12;
            let alpha = gram.lu().solve(&DVector::from_column_slice(&ys)).unwrap();
            let ridge = x.transpose() * alpha;
            let resid = |v: &[f64]| ctx.sse(v).sqrt();
            assert!((resid(&w) - resid(ridge.as_slice())).abs() < 1e-6);
            for (a, b) in w.iter().zip(ridge.iter()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn ols_scale_equivariant() {
        let mut rng = RngStream::new(2, 0);
        let ctx = gaussian_ctx(&mut rng, &[0.3, -1.0, 2.0], 5, 0.1);
        let scaled = RegressionContext { ys: ctx.ys.iter().map(|y| -3.5 * y).collect(), ..ctx.clone() };
        for (a, b) in ols(&ctx).iter().zip(ols(&scaled)) {
            assert!((-3.5 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dmmse_single_task_and_exact_member() {
        let mut rng = RngStream::new(3, 0);
        let pool = linear_pool(vec![vec![0.6, 0.8]]);
        let ctx = gaussian_ctx(&mut rng, &[1.0, 0.0], 3, 0.0);
        assert_eq!(dmmse(&pool, &ctx).unwrap(), vec![0.6, 0.8]);

        let cap = CapSpec::full_sphere(4).unwrap();
        let ws: Vec<_> = (0..16).map(|_| sample_cap(&mut rng, &cap).unwrap()).collect();
        let pool = linear_pool(ws.clone());
        let ctx = gaussian_ctx(&mut rng, &ws[9], 4, 0.0);
        assert_eq!(dmmse(&pool, &ctx).unwrap(), ws[9]);
    }

    #[test]
    fn dmmse_ties_pick_lowest_index() {
        let pool = linear_pool(vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]);
        let ctx = RegressionContext::new(vec![1.0, 0.0], vec![1.0], 2, 0.0).unwrap();
        assert_eq!(dmmse_index(&pool, &ctx).unwrap(), 0);
    }

    #[test]
    fn noisy_dmmse_is_convex_combination() {
        let mut rng = RngStream::new(4, 0);
        let cap = CapSpec::full_sphere(3).unwrap();
        let ws: Vec<_> = (0..8).map(|_| sample_cap(&mut rng, &cap).unwrap()).collect();
        let pool = linear_pool(ws);
        for _ in 0..50 {
            let ctx = gaussian_ctx(&mut rng, &[0.0, 0.0, 1.0], 3, 0.25);
            let w = dmmse(&pool, &ctx).unwrap();
            assert!(norm(&w) <= 1.0 + 1e-9);
        }
        // With no observations the posterior is the uniform pool mean.
        let empty = RegressionContext::new(vec![], vec![], 3, 0.5).unwrap();
        let mean = dmmse(&pool, &empty).unwrap();
        for c in 0..3 {
            let m: f64 = pool.tasks().iter().map(|t| t.weights().unwrap()[c]).sum::<f64>() / 8.0;
            assert!((mean[c] - m).abs() < 1e-12);
        }
    }

    #[test]
    fn bayes_empty_context_is_cap_centroid() {
        // E[cos angle] for the cap on S^2 at half-angle phi:
        // int_0^phi cos t sin t dt / int_0^phi sin t dt = (1 - cos 2phi) / (4 (1 - cos phi)).
        let phi = PI / 3.0;
        let spec = CapSpec::around_e1(3, phi).unwrap();
        let ctx = RegressionContext::new(vec![], vec![], 3, 0.25).unwrap();
        let opts = BayesOptions { n_samples: 1_000_000, ..Default::default() };
        let est = bayes_cap_mc(&spec, &ctx, opts, &mut RngStream::new(5, 0)).unwrap();
        let expected = (1.0 - (2.0 * phi).cos()) / (4.0 * (1.0 - phi.cos()));
        assert!((est.w[0] - expected).abs() < 0.01 * expected, "{} vs {expected}", est.w[0]);
        assert!((est.ess - 1e6).abs() < 1e-6 * 1e6);
    }

    #[test]
    fn bayes_matches_polar_grid_in_two_dimensions() {
        let mut rng = RngStream::new(6, 0);
        let spec = CapSpec::full_sphere(2).unwrap();
        let ctx = gaussian_ctx(&mut rng, &[0.6, 0.8], 5, 0.25);
        let m = 100_000;
        let (mut z, mut wx, mut wy) = (0.0, 0.0, 0.0);
        let logs: Vec<f64> = (0..m)
            .map(|i| {
                let t = 2.0 * PI * (i as f64 + 0.5) / m as f64;
                -ctx.sse(&[t.cos(), t.sin()]) / 0.5
            })
            .collect();
        let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for (i, l) in logs.iter().enumerate() {
            let t = 2.0 * PI * (i as f64 + 0.5) / m as f64;
            let p = (l - top).exp();
            z += p;
            wx += p * t.cos();
            wy += p * t.sin();
        }
        let est = bayes_cap_mc(&spec, &ctx, BayesOptions { n_samples: 200_000, ..Default::default() }, &mut rng).unwrap();
        let err = ((est.w[0] - wx / z).powi(2) + (est.w[1] - wy / z).powi(2)).sqrt();
        assert!(err < 1e-2, "{err}");
    }

    #[test]
    fn bayes_concentrates_on_long_contexts() {
        let mut rng = RngStream::new(7, 0);
        let spec = CapSpec::around_e1(3, PI / 2.0).unwrap();
        let w = [0.2f64.cos(), 0.0, 0.2f64.sin()];
        let ctx = gaussian_ctx(&mut rng, &w, 100, 0.25);
        let est = bayes_cap_mc(&spec, &ctx, BayesOptions::default(), &mut rng).unwrap();
        assert!(est.reliable);
        assert!(norm(&est.w.iter().zip(&w).map(|(a, b)| a - b).collect::<Vec<_>>()) < 0.1);
        assert!(norm(&est.w) <= 1.0 + 1e-12);
    }

    #[test]
    fn bayes_rejects_zero_noise_and_noiseless_surrogate() {
        let spec = CapSpec::around_e1(3, PI / 6.0).unwrap();
        let ctx = RegressionContext::new(vec![1.0, 0.0, 0.0], vec![1.0], 3, 0.0).unwrap();
        assert!(bayes_cap_mc(&spec, &ctx, BayesOptions::default(), &mut RngStream::new(0, 0)).is_err());
        assert!(bayes_cap_noiseless(&spec, &ctx).is_err());
        // Target outside the cap: surrogate lands on the boundary.
        let mut rng = RngStream::new(8, 0);
        let ctx = gaussian_ctx(&mut rng, &unit_axis(3, 2), 3, 0.0);
        let w = bayes_cap_noiseless(&spec, &ctx).unwrap();
        assert!((angle_between(&w, &spec.pole).unwrap() - PI / 6.0).abs() < 1e-9);
    }

    #[test]
    fn cap_bound_examples() {
        let spec = CapSpec::around_e1(3, 120f64.to_radians()).unwrap();
        assert_eq!(cap_bound_loss(&spec, &unit_axis(3, 0)).unwrap(), 0.0);
        let a = 175f64.to_radians();
        let w = [a.cos(), a.sin(), 0.0];
        let expected = 2.0 - 2.0 * 55f64.to_radians().cos();
        assert!((cap_bound_loss(&spec, &w).unwrap() - expected).abs() < 1e-12);
        let full = CapSpec::full_sphere(3).unwrap();
        assert_eq!(cap_bound_loss(&full, &w).unwrap(), 0.0);
        assert!(cap_bound_loss(&spec, &[2.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn cap_bound_matches_monte_carlo_mse() {
        let spec = CapSpec::around_e1(3, 120f64.to_radians()).unwrap();
        let a = 175f64.to_radians();
        let w = [a.cos(), a.sin(), 0.0];
        let w_hat = project_to_cap(&w, &spec).unwrap().point;
        let mut rng = RngStream::new(9, 0);
        let errs: Vec<f64> = (0..100_000)
            .map(|_| {
                let x = rng.normal_vec(3);
                (dot(&w_hat, &x) - dot(&w, &x)).powi(2)
            })
            .collect();
        let (mean, se) = crate::stats::mean_stderr(&errs);
        let exact = cap_bound_loss(&spec, &w).unwrap();
        assert!((mean - exact).abs() < 2.0 * se, "{mean} vs {exact} (se {se})");
    }

    #[test]
    fn baseline_names_round_trip() {
        for k in [BaselineKind::Ols, BaselineKind::Dmmse, BaselineKind::BayesMc, BaselineKind::CapBound] {
            assert_eq!(k.name().parse::<BaselineKind>().unwrap(), k);
        }
        assert!("ridge".parse::<BaselineKind>().is_err());
    }
}
