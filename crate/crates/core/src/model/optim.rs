use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_lr() -> f64 {
    3e-4
}
fn default_wd() -> f64 {
    0.01
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: default_lr(), weight_decay: default_wd(), beta1: default_beta1(), beta2: default_beta2(), eps: default_eps() }
    }
}

/// AdamW with decoupled weight decay and bias-corrected moments:
/// `p <- p (1 - lr wd)`, then `p <- p - lr m_hat / (sqrt(v_hat) + eps)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig, params: &[Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(&p.shape)).collect();
        Self { config, step: 0, m: zeros(), v: zeros() }
    }

    pub fn update(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Shape {
                op: "adamw",
                detail: format!("{} params, {} grads, {} moments", params.len(), grads.len(), self.m.len()),
            });
        }
        if grads.iter().any(|g| !g.all_finite()) {
            return Err(Error::NonFinite("gradient".into()));
        }
        let c = self.config;
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let decay = T::of(1.0 - c.lr * c.weight_decay);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let step_size = T::of(c.lr / bc1);
        let inv_sqrt_bc2 = T::of(1.0 / bc2.sqrt());
        let eps = T::of(c.eps);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if p.shape != g.shape {
                return Err(Error::Shape {
                    op: "adamw",
                    detail: format!("param {:?} vs grad {:?}", p.shape, g.shape),
                });
            }
            for (((pi, &gi), mi), vi) in p.data.iter_mut().zip(&g.data).zip(&mut m.data).zip(&mut v.data) {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                *pi = *pi * decay;
                *pi = *pi - step_size * *mi / (vi.sqrt() * inv_sqrt_bc2 + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad_run(lr: f64, steps: usize) -> f64 {
        let config = AdamWConfig { lr, weight_decay: 0.0, ..AdamWConfig::default() };
        let mut p = vec![Tensor::<f64>::scalar(0.0)];
        let mut opt = AdamW::new(config, &p);
        for _ in 0..steps {
            let g = Tensor::scalar(p[0].data[0] - 5.0);
            opt.update(&mut p, &[g]).unwrap();
        }
        p[0].data[0]
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let config = AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() };
        let mut p = vec![Tensor::<f64>::new(&[2], vec![1.0, -1.0])];
        let mut opt = AdamW::new(config, &p);
        opt.update(&mut p, &[Tensor::new(&[2], vec![0.3, -7.0])]).unwrap();
        assert!((p[0].data[0] - (1.0 - 3e-4)).abs() < 1e-10);
        assert!((p[0].data[1] - (-1.0 + 3e-4)).abs() < 1e-10);
    }

    #[test]
    fn displacement_per_step_is_bounded_by_lr() {
        // |m_hat / sqrt(v_hat)| <= 1 while gradients keep their sign, so
        // 5000 steps at lr 3e-4 move at most 1.5.
        let p = quad_run(3e-4, 5000);
        assert!(p > 0.0 && p <= 1.5 + 1e-9, "{p}");
    }

    #[test]
    fn converges_on_quadratic() {
        let p = quad_run(1e-2, 5000);
        assert!((p - 5.0).abs() < 1e-3, "{p}");
    }

    #[test]
    fn weight_decay_shrinks_with_zero_gradient() {
        let mut p = vec![Tensor::<f64>::scalar(2.0)];
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        opt.update(&mut p, &[Tensor::scalar(0.0)]).unwrap();
        assert!((p[0].data[0] - 2.0 * (1.0 - 3e-4 * 0.01)).abs() < 1e-15);
    }

    #[test]
    fn rejects_non_finite_gradients_without_touching_state() {
        let mut p = vec![Tensor::<f32>::scalar(1.0)];
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        assert!(opt.update(&mut p, &[Tensor::scalar(f32::NAN)]).is_err());
        assert_eq!(opt.step, 0);
        assert_eq!(p[0].data[0], 1.0);
    }
}
