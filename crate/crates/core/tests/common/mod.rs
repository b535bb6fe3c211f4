#![allow(dead_code)]

use std::f64::consts::PI;

use sphere_icl::episode::{make_batch, Batch, InputDistribution};
use sphere_icl::model::{GeluKind, ModelConfig, ModelParams};
use sphere_icl::tasks::{TaskFamily, TaskPrior, TaskSource};
use sphere_icl::RngStream;

pub fn linear_batch(seed: u64, size: usize, d: usize, n: usize, noise_var: f64) -> Batch {
    let prior = TaskPrior::from_angles(TaskFamily::Linear, d, 0.0, PI, noise_var, 1.0).unwrap();
    let src = TaskSource::continuous(&prior).unwrap();
    let inputs = InputDistribution::GaussianIso.sampler(d).unwrap();
    make_batch(&mut RngStream::new(seed, 0), &src, &inputs, size, n).unwrap()
}

/// 1-layer, d_h = 8, 2-head, d = 2, n = 3 model in f64 with erf GELU and
/// weights large enough that no gradient entry is negligible.
pub fn tiny_f64_model(seed: u64) -> ModelParams<f64> {
    let mut cfg = ModelConfig::new(1, 8, 2, 2, 3);
    cfg.gelu = GeluKind::Erf;
    cfg.init_std = 0.3;
    let mut rng = RngStream::new(seed, 1);
    let mut p = ModelParams::<f64>::init(&cfg, &mut rng).unwrap();
    for t in &mut p.tensors {
        for v in &mut t.data {
            *v += 0.1 * rng.normal();
        }
    }
    p
}

/// Largest elementwise relative error between the analytic gradient and
/// central differences, `|a - n| / max(|a|, |n|, floor)`.
pub fn max_gradient_error(params: &ModelParams<f64>, batch: &Batch, h: f64, floor: f64) -> f64 {
    let (_, grads) = params.loss_and_grads(batch).unwrap();
    let mut worst: f64 = 0.0;
    let mut p = params.clone();
    for ti in 0..p.tensors.len() {
        for j in 0..p.tensors[ti].data.len() {
            let orig = p.tensors[ti].data[j];
            p.tensors[ti].data[j] = orig + h;
            let up = p.train_loss(batch).unwrap();
            p.tensors[ti].data[j] = orig - h;
            let down = p.train_loss(batch).unwrap();
            p.tensors[ti].data[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads[ti].data[j];
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
            worst = worst.max(err);
        }
    }
    worst
}

/// Perturbs token `j` of every episode and reports whether any prediction
/// at an earlier position changed (bitwise).
pub fn causality_violated(params: &ModelParams<f32>, batch: &Batch, rng: &mut RngStream) -> bool {
    let [b, t, d] = batch.shape();
    let base = params.forward_all(&batch.tokens, b, t).unwrap();
    for j in 1..t {
        let mut tokens = batch.tokens.clone();
        for bi in 0..b {
            for c in 0..d {
                tokens[(bi * t + j) * d + c] += rng.normal();
            }
        }
        let out = params.forward_all(&tokens, b, t).unwrap();
        for bi in 0..b {
            for i in 0..j {
                if out[bi * t + i].to_bits() != base[bi * t + i].to_bits() {
                    return true;
                }
            }
        }
    }
    false
}
