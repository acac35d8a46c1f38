//! Adam with a linearly decaying learning rate.

use edt_tensor::{Real, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{EdtError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub lr_start: f64,
    pub lr_end: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr_start: 1e-3,
            lr_end: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimConfig {
    /// Rate at `step` of a `total`-step run, falling linearly from
    /// `lr_start` (first step) to `lr_end` (last step).
    pub fn lr(&self, step: u64, total: u64) -> f64 {
        if total <= 1 {
            return self.lr_start;
        }
        let frac = (step.min(total - 1)) as f64 / (total - 1) as f64;
        self.lr_start + frac * (self.lr_end - self.lr_start)
    }
}

/// First and second moment estimates for every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: OptimConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: OptimConfig, params: &[Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Applies one update; `grads[i]` is `None` for parameters the loss did
    /// not touch (their moments still decay).
    pub fn update(&mut self, params: &mut [Tensor<T>], grads: &[Option<&Tensor<T>>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(EdtError::Argument(format!(
                "optimizer holds {} moments, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (c.beta1, c.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let (tb1, tb2) = (T::of(b1), T::of(b2));
        let (one, eps) = (T::one(), T::of(c.eps));
        let step_size = T::of(lr / bc1);
        let inv_bc2 = T::of(1.0 / bc2);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let g = grads[i].map(|g| g.data());
            for (k, w) in p.data_mut().iter_mut().enumerate() {
                let gk = g.map_or(T::zero(), |g| g[k]);
                m[k] = tb1 * m[k] + (one - tb1) * gk;
                v[k] = tb2 * v[k] + (one - tb2) * gk * gk;
                *w -= step_size * m[k] / ((v[k] * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_decay_endpoints() {
        let c = OptimConfig::default();
        assert_eq!(c.lr(0, 100), 1e-3);
        assert!((c.lr(99, 100) - 5e-5).abs() < 1e-18);
        assert!((c.lr(33, 67) - (1e-3 + 0.5 * (5e-5 - 1e-3))).abs() < 1e-15);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![Tensor::new(&[2], vec![1.0f64, -1.0]).unwrap()];
        let g = Tensor::new(&[2], vec![0.5, -3.0]).unwrap();
        let mut adam = Adam::new(OptimConfig::default(), &p);
        adam.update(&mut p, &[Some(&g)], 0.1).unwrap();
        assert!((p[0].data()[0] - 0.9).abs() < 1e-6);
        assert!((p[0].data()[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = vec![Tensor::new(&[1], vec![3.0f64]).unwrap()];
        let mut adam = Adam::new(OptimConfig::default(), &p);
        for _ in 0..2000 {
            let g = p[0].map(|x| 2.0 * x);
            adam.update(&mut p, &[Some(&g)], 0.01).unwrap();
        }
        assert!(p[0].data()[0].abs() < 1e-2);
    }
}
