//! Acceptance gate: one PASS/FAIL line per criterion, nonzero exit if any
//! fails. The desk-scale training sweep (criterion 8, and the parts of 9 and
//! 10 that reuse it) only trains with `--include-ignored`/`--ignored` or
//! `SPHERE_ICL_SLOW=1`; otherwise it is judged from a previously completed
//! sweep when one exists and skipped when not.

mod common;

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use sphere_icl::baselines::{bayes_cap_mc, cap_bound_loss, dmmse, dmmse_index, ols, BayesOptions, RegressionContext};
use sphere_icl::episode::InputDistribution;
use sphere_icl::harness::{expand_runs, run_dir, run_experiment, ExperimentConfig, ExperimentKind, RunSpec, Summary, SweepOptions};
use sphere_icl::metrics::{radius_curve, test_loss, Baseline, DEFAULT_RADII, NSR_THRESHOLD};
use sphere_icl::model::{Checkpoint, ModelConfig, ModelParams, Trainer};
use sphere_icl::sphere::{angle_between, norm, sample_band, sample_cap, unit_axis, BandSpec, CapSpec};
use sphere_icl::stats::ks_two_sample;
use sphere_icl::tasks::{make_task_pool, TaskFamily, TaskPrior, TaskSource};
use sphere_icl::RngStream;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Uniform on the sphere by normalized Gaussians, kept when the polar angle
/// lies in `[lo, hi]`.
fn rejection_angles(dim: usize, lo: f64, hi: f64, count: usize, rng: &mut RngStream) -> Vec<f64> {
    let pole = unit_axis(dim, 0);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let g = rng.normal_vec(dim);
        let a = angle_between(&g, &pole).unwrap();
        if (lo..=hi).contains(&a) {
            out.push(a);
        }
    }
    out
}

fn criterion_1() -> Outcome {
    const N: usize = 100_000;
    let pole = unit_axis(3, 0);
    let mut rng = RngStream::new(1, 0);
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for phi in [30.0f64, 60.0, 120.0] {
        let cap = CapSpec::around_e1(3, phi.to_radians()).unwrap();
        let ours: Vec<f64> = (0..N).map(|_| angle_between(&sample_cap(&mut rng, &cap).unwrap(), &pole).unwrap()).collect();
        let oracle = rejection_angles(3, 0.0, phi.to_radians(), N, &mut rng);
        let ks = ks_two_sample(&ours, &oracle);
        parts.push(format!("cap {phi}: {ks:.4}"));
        worst = worst.max(ks);
    }
    for (delta, width) in [(30.0f64, 30.0f64), (170.0, 5.0)] {
        let band = BandSpec::around_e1(3, delta.to_radians(), width.to_radians()).unwrap();
        let ours: Vec<f64> = (0..N).map(|_| angle_between(&sample_band(&mut rng, &band).unwrap(), &pole).unwrap()).collect();
        let oracle = rejection_angles(3, delta.to_radians(), (delta + width).to_radians(), N, &mut rng);
        let ks = ks_two_sample(&ours, &oracle);
        parts.push(format!("band {delta}+{width}: {ks:.4}"));
        worst = worst.max(ks);
    }
    check(worst < 0.01, format!("KS statistics {} (limit 0.01)", parts.join(", ")))
}

fn criterion_2() -> Outcome {
    const N: usize = 100_000;
    let d = 10;
    let cap = CapSpec::around_e1(d, PI).unwrap();
    let mut rng = RngStream::new(2, 0);
    let mut sums = vec![0.0; d];
    let mut norm_err: f64 = 0.0;
    for _ in 0..N {
        let w = sample_cap(&mut rng, &cap).unwrap();
        norm_err = norm_err.max((norm(&w) - 1.0).abs());
        sums.iter_mut().zip(&w).for_each(|(s, x)| *s += x);
    }
    let worst_mean = sums.iter().map(|s| (s / N as f64).abs()).fold(0.0, f64::max);
    let limit = 4.0 / (N as f64).sqrt();
    check(
        worst_mean < limit && norm_err < 1e-9,
        format!("max |coordinate mean| {worst_mean:.2e} (limit {limit:.2e}), max norm error {norm_err:.1e}"),
    )
}

fn criterion_3() -> Outcome {
    let params = common::tiny_f64_model(3);
    let batch = common::linear_batch(3, 4, 2, 3, 0.0);
    let err = common::max_gradient_error(&params, &batch, 1e-4, 1e-7);
    check(err < 1e-4, format!("max relative gradient error {err:.2e} over {} parameters", params.parameter_count()))
}

fn criterion_4() -> Outcome {
    let params = ModelParams::<f32>::init(&ModelConfig::desk(3, 8), &mut RngStream::new(4, 0)).unwrap();
    let batch = common::linear_batch(4, 8, 3, 8, 0.0);
    let violated = common::causality_violated(&params, &batch, &mut RngStream::new(4, 1));
    check(!violated, format!("earlier predictions {} under later-token perturbation", if violated { "changed" } else { "unchanged" }))
}

fn criterion_5() -> Outcome {
    let mut rng = RngStream::new(5, 0);
    // OLS recovery with k = d = 10, noiseless.
    let d = 10;
    let mut ols_err: f64 = 0.0;
    for _ in 0..20 {
        let w = rng.normal_vec(d);
        let xs = rng.normal_vec(d * d);
        let ys: Vec<f64> = xs.chunks(d).map(|x| x.iter().zip(&w).map(|(a, b)| a * b).sum()).collect();
        let est = ols(&RegressionContext::new(xs, ys, d, 0.0).unwrap());
        ols_err = ols_err.max(est.iter().zip(&w).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    // dMMSE against brute-force enumeration of the pool.
    let prior = TaskPrior::from_angles(TaskFamily::Linear, 3, 0.0, PI, 0.25, 1.0).unwrap();
    let mut mismatches = 0;
    let mut post_err: f64 = 0.0;
    for _ in 0..1000 {
        let pool = make_task_pool(&mut rng, &prior, 16).unwrap();
        let k = 1 + rng.index(6);
        let xs = rng.normal_vec(3 * k);
        let ys = rng.normal_vec(k);
        let noiseless = RegressionContext::new(xs.clone(), ys.clone(), 3, 0.0).unwrap();
        let sse: Vec<f64> = pool.tasks().iter().map(|t| noiseless.sse(t.weights().unwrap())).collect();
        let best = (0..16).fold(0, |b, i| if sse[i] < sse[b] { i } else { b });
        let got = dmmse(&pool, &noiseless).unwrap();
        if dmmse_index(&pool, &noiseless).unwrap() != best || got != pool.tasks()[best].weights().unwrap() {
            mismatches += 1;
        }
        let noisy = RegressionContext::new(xs, ys, 3, 0.25).unwrap();
        let lw: Vec<f64> = sse.iter().map(|s| -s / 0.5).collect();
        let m = lw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let p: Vec<f64> = lw.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = p.iter().sum();
        let got = dmmse(&pool, &noisy).unwrap();
        for j in 0..3 {
            let want: f64 = pool.tasks().iter().zip(&p).map(|(t, pi)| pi * t.weights().unwrap()[j]).sum::<f64>() / z;
            post_err = post_err.max((got[j] - want).abs());
        }
    }
    // Bayes posterior mean on the circle against polar quadrature.
    let (k, var) = (5, 0.25_f64);
    let w_true = [0.6, 0.8];
    let xs = rng.normal_vec(2 * k);
    let ys: Vec<f64> =
        xs.chunks(2).map(|x| x[0] * w_true[0] + x[1] * w_true[1] + var.sqrt() * rng.normal()).collect();
    let ctx = RegressionContext::new(xs, ys, 2, var).unwrap();
    let grid = 200_000;
    let (mut z, mut mean) = (0.0, [0.0; 2]);
    let lws: Vec<(f64, [f64; 2])> = (0..grid)
        .map(|i| {
            let th = 2.0 * PI * (i as f64 + 0.5) / grid as f64;
            let w = [th.cos(), th.sin()];
            (-ctx.sse(&w) / (2.0 * var), w)
        })
        .collect();
    let m = lws.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    for (lw, w) in &lws {
        let p = (lw - m).exp();
        z += p;
        mean[0] += p * w[0];
        mean[1] += p * w[1];
    }
    let cap = CapSpec::around_e1(2, PI).unwrap();
    let opts = BayesOptions { n_samples: 200_000, ..BayesOptions::default() };
    let est = bayes_cap_mc(&cap, &ctx, opts, &mut rng).unwrap();
    let bayes_err = ((est.w[0] - mean[0] / z).powi(2) + (est.w[1] - mean[1] / z).powi(2)).sqrt();
    check(
        ols_err < 1e-8 && mismatches == 0 && post_err < 1e-12 && bayes_err < 1e-2,
        format!(
            "OLS max error {ols_err:.1e}; dMMSE argmin mismatches {mismatches}/1000, posterior error {post_err:.1e}; \
             Bayes MC vs quadrature l2 {bayes_err:.2e} (ESS {:.0})",
            est.ess
        ),
    )
}

/// `E[cos(theta)]` for the uniform measure on the band `[lo, hi]` of the
/// unit sphere in `dim` dimensions, by midpoint quadrature of `sin^(d-2)`.
fn mean_cos(dim: usize, lo: f64, hi: f64) -> f64 {
    let steps = 200_000;
    let h = (hi - lo) / steps as f64;
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..steps {
        let t = lo + (i as f64 + 0.5) * h;
        let wgt = t.sin().powi(dim as i32 - 2);
        num += t.cos() * wgt;
        den += wgt;
    }
    num / den
}

fn criterion_6() -> Outcome {
    let mut rng = RngStream::new(6, 0);
    let mut worst: f64 = 0.0;
    let mut failures = 0;
    for case in 0..20 {
        let d = 2 + rng.index(9);
        let lo = rng.uniform_in(0.0, 150.0);
        let width = rng.uniform_in(5.0, 180.0 - lo);
        let noise = if case % 2 == 0 { 0.0 } else { 0.25 };
        let w_hat: Vec<f64> = rng.normal_vec(d).iter().map(|v| v * rng.uniform_in(0.2, 1.0)).collect();
        let prior = TaskPrior::from_angles(TaskFamily::Linear, d, lo.to_radians(), (lo + width).to_radians(), noise, 1.0).unwrap();
        let source = TaskSource::continuous(&prior).unwrap();
        let inputs = InputDistribution::GaussianIso.sampler(d).unwrap();
        let est = test_loss(&Baseline::Fixed(w_hat.clone()), &source, &inputs, 8, 20_000, &mut rng).unwrap();
        // E||w_hat - w||^2 = ||w_hat||^2 - 2 w_hat . E[w] + 1, E[w] = E[cos] e_1.
        let c = mean_cos(d, lo.to_radians(), (lo + width).to_radians());
        let expect = w_hat.iter().map(|v| v * v).sum::<f64>() - 2.0 * w_hat[0] * c + 1.0 + noise;
        let z = (est.raw_loss - expect).abs() / est.stderr;
        worst = worst.max(z);
        if z > 3.0 {
            failures += 1;
        }
    }
    check(failures == 0, format!("20 cases, worst deviation {worst:.2} stderr (limit 3)"))
}

fn criterion_7() -> Outcome {
    let target = 175f64.to_radians();
    let w_star = [target.cos(), target.sin(), 0.0];
    let mut exact_err: f64 = 0.0;
    let mut worst_z: f64 = 0.0;
    let mut prev = f64::INFINITY;
    let mut monotone = true;
    let mut zero_tail = true;
    let mut rng = RngStream::new(7, 0);
    let band = TaskPrior::Linear {
        region: sphere_icl::sphere::SphereRegion::Band(BandSpec::around_e1(3, target, 1e-9).unwrap()),
        noise_var: 0.0,
    };
    let source = TaskSource::continuous(&band).unwrap();
    let inputs = InputDistribution::GaussianIso.sampler(3).unwrap();
    let mut phis: Vec<f64> = (1..=12).map(|i| 15.0 * i as f64).collect();
    phis.push(175.0);
    phis.sort_by(f64::total_cmp);
    for phi in phis {
        let cap = CapSpec::around_e1(3, f64::to_radians(phi)).unwrap();
        let loss = cap_bound_loss(&cap, &w_star).unwrap();
        let closed = if phi < 175.0 { 2.0 - 2.0 * (175f64 - phi).to_radians().cos() } else { 0.0 };
        exact_err = exact_err.max((loss - closed).abs());
        monotone &= loss <= prev;
        prev = loss;
        if phi >= 175.0 {
            zero_tail &= loss.abs() < 1e-12;
        }
        let est = test_loss(&Baseline::CapBound(cap), &source, &inputs, 4, 5_000, &mut rng).unwrap();
        // Round-off floor: at phi >= 175 both loss and stderr are ~1e-19.
        let excess = ((est.raw_loss - closed).abs() - 1e-12).max(0.0);
        worst_z = worst_z.max(if excess == 0.0 { 0.0 } else { excess / est.stderr });
    }
    check(
        exact_err < 1e-12 && worst_z <= 3.0 && monotone && zero_tail,
        format!("closed-form error {exact_err:.1e}, Monte Carlo worst {worst_z:.2} stderr, monotone {monotone}, zero at >= 175: {zero_tail}"),
    )
}

fn criterion_9_analytic() -> Result<String, String> {
    let cap = CapSpec::around_e1(3, 90f64.to_radians()).unwrap();
    let inputs = InputDistribution::GaussianIso.sampler(3).unwrap();
    let curve = radius_curve(&Baseline::Zero, &cap, &DEFAULT_RADII, 0.0, &inputs, 4, 20_000, &mut RngStream::new(9, 0)).unwrap();
    let worst = curve.iter().map(|(r, e)| (e.raw_loss - r * r).abs() / e.stderr).fold(0.0, f64::max);
    check(worst <= 3.0, format!("zero predictor vs R^2: worst {worst:.2} stderr over R = {DEFAULT_RADII:?}"))
}

// ---- desk-scale sweep ----

fn desk_dir() -> PathBuf {
    std::env::var_os("SPHERE_ICL_ACCEPTANCE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../target/acceptance/desk_transition"))
}

fn desk_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk(ExperimentKind::Transition);
    cfg.grids.phi = vec![30.0, 60.0, 90.0, 120.0, 150.0, 180.0];
    cfg.seeds = vec![0];
    cfg.eval.baselines = false;
    cfg
}

fn sweep_complete(dir: &Path) -> bool {
    let Ok(text) = fs::read_to_string(dir.join("manifest.json")) else { return false };
    let Ok(m) = serde_json::from_str::<serde_json::Value>(&text) else { return false };
    m["runs"].as_object().is_some_and(|r| !r.is_empty() && r.values().all(|e| e["status"] == "complete"))
}

fn criterion_8(slow: bool) -> Option<Outcome> {
    let dir = desk_dir();
    let cfg = desk_config();
    if !slow && !sweep_complete(&dir) {
        return None;
    }
    let start = Instant::now();
    let summary = if slow {
        match run_experiment(&cfg, &dir, &SweepOptions::default()) {
            Ok(r) => r.summary,
            Err(e) => return Some(Err(format!("sweep failed: {e}"))),
        }
    } else {
        // Judge the completed sweep from its stored summary.
        let text = fs::read_to_string(dir.join("summary.json")).unwrap_or_default();
        match serde_json::from_str::<Summary>(&text) {
            Ok(s) => s,
            Err(e) => return Some(Err(format!("unreadable summary.json: {e}"))),
        }
    };
    let Some(t) = summary.transitions.first() else {
        return Some(Err(format!("no transition summary ({} runs failed)", summary.failed.len())));
    };
    let at = |phi: f64| t.nsr.iter().find(|p| p.0 == phi).map(|p| p.1).unwrap_or(f64::NAN);
    let ok = at(30.0) >= NSR_THRESHOLD && at(60.0) >= NSR_THRESHOLD && at(180.0) < NSR_THRESHOLD;
    let table: Vec<String> = t.nsr.iter().map(|(p, v)| format!("{p}:{v:.3}")).collect();
    Some(check(
        ok,
        format!(
            "NSR {{{}}}; phi_c {:?}{}{}; {:.0}s",
            table.join(", "),
            t.phi_c,
            if t.outside_window { " (outside 90..165, flagged)" } else { "" },
            if t.reverse_crossings.is_empty() { String::new() } else { format!("; reverse crossings {:?}", t.reverse_crossings) },
            start.elapsed().as_secs_f64()
        ),
    ))
}

fn desk_run(phi: f64) -> RunSpec {
    expand_runs(&desk_config()).into_iter().find(|r| r.phi == phi).unwrap()
}

/// Trained phi = 90 model at R = 0.5, recorded only.
fn criterion_9_trained() -> Option<String> {
    let ckpt = run_dir(&desk_dir(), &desk_run(90.0).id).join("checkpoint.ckpt");
    let ckpt = Checkpoint::load(&ckpt).ok()?;
    let model = Trainer::from_checkpoint(&ckpt).ok()?.params;
    let cap = CapSpec::around_e1(3, 90f64.to_radians()).unwrap();
    let inputs = InputDistribution::GaussianIso.sampler(3).unwrap();
    let curve = radius_curve(&model, &cap, &[0.5, 1.0], 0.0, &inputs, 32, 2000, &mut RngStream::new(9, 1)).ok()?;
    Some(format!(
        "trained phi=90 model: loss {:.4} +- {:.4} at R=0.5, {:.4} +- {:.4} at R=1 (recorded)",
        curve[0].1.raw_loss, curve[0].1.stderr, curve[1].1.raw_loss, curve[1].1.stderr
    ))
}

fn csv_files(dir: &Path) -> Vec<PathBuf> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map(|rd| rd.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.extension().is_some_and(|x| x == "csv")).collect())
        .unwrap_or_default();
    out.sort();
    out
}

fn same_csvs(a: &Path, b: &Path) -> Result<usize, String> {
    let files = csv_files(a);
    if files.is_empty() {
        return Err(format!("no CSVs under {}", a.display()));
    }
    for f in &files {
        let other = b.join(f.file_name().unwrap());
        if fs::read(f).ok() != fs::read(&other).ok() {
            return Err(format!("{} differs", other.display()));
        }
    }
    Ok(files.len())
}

/// Desk architecture and data, cut to a few steps, run twice from scratch.
fn criterion_10_short() -> Outcome {
    let mut cfg = desk_config();
    cfg.grids.phi = vec![60.0];
    cfg.schedule.steps = 20;
    cfg.schedule.checkpoint_every = 7;
    cfg.eval.n_episodes = 200;
    cfg.eval.baselines = true;
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        run_experiment(&cfg, d.path(), &SweepOptions::default()).map_err(|e| e.to_string())?;
    }
    let id = &expand_runs(&cfg)[0].id;
    let n = same_csvs(&run_dir(a.path(), id), &run_dir(b.path(), id))? + same_csvs(a.path(), b.path())?;
    Ok(format!("{n} CSVs identical across two 20-step desk runs"))
}

/// A completed desk run retrained from scratch in a fresh directory.
fn criterion_10_full() -> Outcome {
    let spec = desk_run(30.0);
    let mut cfg = desk_config();
    cfg.grids.phi = vec![spec.phi];
    let fresh = tempfile::tempdir().unwrap();
    run_experiment(&cfg, fresh.path(), &SweepOptions::default()).map_err(|e| e.to_string())?;
    let n = same_csvs(&run_dir(&desk_dir(), &spec.id), &run_dir(fresh.path(), &spec.id))?;
    Ok(format!("{n} CSVs of {} identical after a full rerun", spec.id))
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let slow = args.iter().any(|a| a == "--ignored" || a == "--include-ignored")
        || std::env::var("SPHERE_ICL_SLOW").is_ok_and(|v| v == "1");
    let mut failed = 0;
    let mut report = |n: u32, outcome: Option<Outcome>| {
        let line = match outcome {
            Some(Ok(d)) => format!("criterion {n}: PASS ({d})"),
            Some(Err(d)) => {
                failed += 1;
                format!("criterion {n}: FAIL ({d})")
            }
            None => format!(
                "criterion {n}: SKIP (desk sweep not run; use --include-ignored or SPHERE_ICL_SLOW=1, output in {})",
                desk_dir().display()
            ),
        };
        println!("{line}");
    };
    let fast: [(u32, fn() -> Outcome); 6] =
        [(1, criterion_1), (2, criterion_2), (3, criterion_3), (4, criterion_4), (5, criterion_5), (6, criterion_6)];
    for (n, f) in fast {
        report(n, Some(f()));
    }
    report(7, Some(criterion_7()));
    report(8, criterion_8(slow));
    let c9 = criterion_9_analytic().map(|d| match criterion_9_trained() {
        Some(t) => format!("{d}; {t}"),
        None => format!("{d}; trained-model record needs the desk sweep"),
    });
    report(9, Some(c9));
    let c10 = criterion_10_short().and_then(|d| {
        if slow && sweep_complete(&desk_dir()) {
            criterion_10_full().map(|f| format!("{d}; {f}"))
        } else {
            Ok(d)
        }
    });
    report(10, Some(c10));
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
