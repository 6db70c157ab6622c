//! First-order optimizers over a [`ParamSet`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::scalar::Scalar;
use crate::tape::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    /// Heavy-ball SGD; `beta1` is the momentum.
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Step after which the learning rate decays linearly to zero at the
    /// final step. `None` keeps it constant.
    pub decay_start: Option<u64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            decay_start: None,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("optimizer.lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("optimizer.beta1 and optimizer.beta2 must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("optimizer.eps must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate for 1-based `step` of a `total`-step run.
    pub fn lr_at(&self, step: u64, total: u64) -> f64 {
        match self.decay_start {
            Some(start) if step > start && total > start => {
                let frac = (step - start) as f64 / (total - start) as f64;
                self.lr * (1.0 - frac).max(0.0)
            }
            _ => self.lr,
        }
    }
}

/// Per-network optimizer state: first and second moments plus step count.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        let zeros = || params.iter().map(|(_, t)| Tensor::zeros(t.raw_dim())).collect();
        Self { m: zeros(), v: zeros(), t: 0 }
    }

    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Tensor<T>], lr: f64, cfg: &OptimizerConfig) {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter tensor");
        self.t += 1;
        let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
        let (one, eps, lr_t) = (T::one(), T::lit(cfg.eps), T::lit(lr));
        match cfg.kind {
            OptimizerKind::Adam => {
                let c1 = one - b1.powi(self.t as i32);
                let c2 = one - b2.powi(self.t as i32);
                for (((p, g), m), v) in params.tensors_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
                    ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                        *m = b1 * *m + (one - b1) * g;
                        *v = b2 * *v + (one - b2) * g * g;
                        let mhat = *m / c1;
                        let vhat = *v / c2;
                        *p = *p - lr_t * mhat / (vhat.sqrt() + eps);
                    });
                }
            }
            OptimizerKind::Sgd => {
                for ((p, g), m) in params.tensors_mut().zip(grads).zip(&mut self.m) {
                    ndarray::Zip::from(p).and(g).and(m).for_each(|p, &g, m| {
                        *m = b1 * *m + g;
                        *p = *p - lr_t * *m;
                    });
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};

    fn single(v: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.push("w", ArrayD::from_elem(IxDyn(&[2]), v));
        p
    }

    #[test]
    fn zero_gradient_leaves_parameters_untouched() {
        let cfg = OptimizerConfig::default();
        let mut p = single(0.3);
        let mut opt = Adam::new(&p);
        opt.step(&mut p, &[ArrayD::zeros(IxDyn(&[2]))], cfg.lr, &cfg);
        assert_eq!(p, single(0.3));
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let cfg = OptimizerConfig::default();
        let mut p = single(0.0);
        let mut opt = Adam::new(&p);
        opt.step(&mut p, &[ArrayD::from_elem(IxDyn(&[2]), 5.0)], 0.01, &cfg);
        for &v in p.get("w").unwrap() {
            assert!((v + 0.01).abs() < 1e-8);
        }
    }

    #[test]
    fn linear_decay() {
        let cfg = OptimizerConfig {
            decay_start: Some(100),
            ..Default::default()
        };
        assert_eq!(cfg.lr_at(50, 200), cfg.lr);
        assert!((cfg.lr_at(150, 200) - cfg.lr * 0.5).abs() < 1e-15);
        assert_eq!(cfg.lr_at(200, 200), 0.0);
    }
}
