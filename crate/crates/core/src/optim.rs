//! AdamW with a cosine warm-restart learning-rate schedule.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Epochs per cosine cycle.
    pub restart_epochs: usize,
    pub eta_min: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            restart_epochs: 50,
            eta_min: 0.0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.restart_epochs >= 1
            && (0.0..=self.lr).contains(&self.eta_min);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Cosine annealing with warm restarts every `period` steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineRestarts {
    pub base_lr: f64,
    pub eta_min: f64,
    pub period: usize,
}

impl CosineRestarts {
    pub fn lr(&self, step: usize) -> f64 {
        let t = (step % self.period.max(1)) as f64 / self.period.max(1) as f64;
        self.eta_min + 0.5 * (self.base_lr - self.eta_min) * (1.0 + (PI * t).cos())
    }
}

/// Decoupled-weight-decay Adam over the trainable tensors of a store.
#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: OptimConfig,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
    t: u64,
}

impl AdamW {
    pub fn new(cfg: OptimConfig, store: &ParamStore) -> Self {
        Self {
            cfg,
            moments: vec![None; store.len()],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update from the gradients accumulated in `store`.
    /// Trainable tensors without a gradient slot count as zero gradient.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        let ids = store.trainable_ids();
        for &id in &ids {
            if let Some(g) = store.get(id).grad() {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of {}", store.name(id))));
                }
            }
        }
        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for id in ids {
            let t = store.get_mut(id);
            let n = t.numel();
            let grad = t.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
            let (m, v) = self.moments[id.index()].get_or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            for (k, x) in t.data_mut().iter_mut().enumerate() {
                let g = grad[k];
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g;
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g * g;
                let update = (m[k] / bc1) / ((v[k] / bc2).sqrt() + c.eps);
                *x -= lr * (update + c.weight_decay * *x);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn schedule_restarts_at_period_boundaries() {
        let s = CosineRestarts {
            base_lr: 1e-3,
            eta_min: 0.0,
            period: 10,
        };
        assert_eq!(s.lr(0), 1e-3);
        assert_eq!(s.lr(10), 1e-3);
        assert_eq!(s.lr(30), 1e-3);
        assert!((s.lr(5) - 5e-4).abs() < 1e-15);
        assert!(s.lr(9) < s.lr(8));
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        store.get_mut(id).accumulate_grad(&[0.0; 3]).unwrap();
        let cfg = OptimConfig {
            weight_decay: 0.0,
            ..OptimConfig::default()
        };
        let mut opt = AdamW::new(cfg, &store);
        for _ in 0..10 {
            opt.step(&mut store, 1e-3).unwrap();
        }
        assert_eq!(store.get(id).data(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut store = ParamStore::new();
        let id = store.add("decoder.head.w", Tensor::scalar(1.0));
        store.get_mut(id).accumulate_grad(&[f64::NAN]).unwrap();
        let mut opt = AdamW::new(OptimConfig::default(), &store);
        let e = opt.step(&mut store, 1e-3).unwrap_err().to_string();
        assert!(e.contains("decoder.head.w"), "{e}");
    }

    #[test]
    fn quadratic_bowl_converges() {
        // f(x) = (x - 3)^2, minimized at 3
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::scalar(0.0));
        let cfg = OptimConfig {
            weight_decay: 0.0,
            ..OptimConfig::default()
        };
        let sched = CosineRestarts {
            base_lr: 0.1,
            eta_min: 0.0,
            period: 500,
        };
        let mut opt = AdamW::new(cfg, &store);
        for step in 0..500 {
            store.zero_grads();
            let x = store.get(id).data()[0];
            store.get_mut(id).accumulate_grad(&[2.0 * (x - 3.0)]).unwrap();
            opt.step(&mut store, sched.lr(step)).unwrap();
        }
        let x = store.get(id).data()[0];
        assert!((x - 3.0).abs() < 1e-6, "{x}");
    }
}
