// SPDX-License-Identifier: MIT OR Apache-2.0

use crate::model::{ModelConfig, Parameters};
use crate::real::Real;

/// `base * min(step / warmup, sqrt(warmup / step))` for `step >= 1`.
pub fn inverse_sqrt_lr(base: f64, warmup: usize, step: usize) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup.max(1) as f64;
    base * (s / w).min((w / s).sqrt())
}

pub struct Adam<T> {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Parameters<T>,
    v: Parameters<T>,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: &ModelConfig, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam { beta1, beta2, eps, t: 0, m: Parameters::zeros(cfg), v: Parameters::zeros(cfg) }
    }

    pub fn step(&mut self, params: &mut Parameters<T>, grads: &Parameters<T>, lr: f64) {
        self.t += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (c1, c2) = (T::one() - b1, T::one() - b2);
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let step = T::of(lr / bc1);
        let bc2_sqrt = T::of(bc2.sqrt());
        let eps = T::of(self.eps);
        let ps = params.tensors_mut();
        let gs = grads.tensors();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for (((p, g), m), v) in ps.into_iter().zip(gs).zip(ms).zip(vs) {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + c1 * gi;
                v[i] = b2 * v[i] + c2 * gi * gi;
                p[i] -= step * m[i] / (v[i].sqrt() / bc2_sqrt + eps);
            }
        }
    }
}

/// Scales `grads` in place so their global norm is at most `max_norm`.
/// Returns the norm before scaling.
pub fn clip_grad_norm<T: Real>(grads: &mut Parameters<T>, max_norm: f64) -> f64 {
    let norm = grads.sq_norm().sqrt();
    if norm > max_norm {
        let s = T::of(max_norm / norm);
        for t in grads.tensors_mut() {
            for x in t.iter_mut() {
                *x *= s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig { n_layers: 1, n_heads: 1, d_model: 4, d_ff: 4, vocab_size: 3, max_positions: 4 }
    }

    #[test]
    fn schedule_pointwise() {
        assert!((inverse_sqrt_lr(0.005, 4000, 1) - 0.005 / 4000.0).abs() < 1e-15);
        assert!((inverse_sqrt_lr(0.005, 4000, 2000) - 0.0025).abs() < 1e-15);
        assert_eq!(inverse_sqrt_lr(0.005, 4000, 4000), 0.005);
        assert!((inverse_sqrt_lr(0.005, 4000, 16000) - 0.0025).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_step_is_identity() {
        let mut p = Parameters::<f64>::init(&cfg(), 3);
        let before = p.clone();
        let mut adam = Adam::new(&cfg(), 0.9, 0.98, 1e-8);
        let zero = Parameters::zeros(&cfg());
        for _ in 0..3 {
            adam.step(&mut p, &zero, 0.01);
        }
        assert_eq!(p.tensors(), before.tensors());
    }

    #[test]
    fn first_step_moves_by_lr_in_sign_direction() {
        let mut p = Parameters::<f64>::zeros(&cfg());
        let mut g = Parameters::<f64>::zeros(&cfg());
        g.out_b = vec![2.0, -0.5, 0.0];
        let mut adam = Adam::new(&cfg(), 0.9, 0.98, 1e-12);
        adam.step(&mut p, &g, 0.1);
        assert!((p.out_b[0] + 0.1).abs() < 1e-9);
        assert!((p.out_b[1] - 0.1).abs() < 1e-9);
        assert_eq!(p.out_b[2], 0.0);
    }

    #[test]
    fn clipping() {
        let mut g = Parameters::<f64>::zeros(&cfg());
        g.out_b = vec![3.0, 4.0, 0.0];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g.sq_norm() - 1.0).abs() < 1e-12);
    }
}
