//! Adam with linear warmup and step decays.

use crate::error::{ReidError, Result};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::pipeline::config::PaperParams;
use crate::tensor::Tensor;

const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub decay_steps: Vec<usize>,
    pub decay_factor: f64,
}

impl Schedule {
    pub fn from_params(p: &PaperParams, steps_per_epoch: usize) -> Self {
        Schedule {
            base_lr: p.lr,
            warmup_steps: p.warmup_epochs * steps_per_epoch,
            decay_steps: p.decay_epochs.iter().map(|e| e * steps_per_epoch).collect(),
            decay_factor: p.decay_factor,
        }
    }

    /// Learning rate of the 0-based optimizer step `step`.
    pub fn lr(&self, step: usize) -> f64 {
        let warm = if step < self.warmup_steps {
            (step + 1) as f64 / self.warmup_steps as f64
        } else {
            1.0
        };
        let decays = self.decay_steps.iter().filter(|&&d| step >= d).count();
        self.base_lr * warm * self.decay_factor.powi(decays as i32)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub step: usize,
    /// First and second moments, indexed like the store; empty for buffers.
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        let zeros = |p: &crate::params::Param| match p.kind {
            ParamKind::Trainable => Tensor::zeros(p.value.shape()),
            ParamKind::Buffer => Tensor::zeros(&[0]),
        };
        Adam {
            beta1,
            beta2,
            weight_decay,
            step: 0,
            m: store.iter().map(|(_, p)| zeros(p)).collect(),
            v: store.iter().map(|(_, p)| zeros(p)).collect(),
        }
    }

    /// Applies one update. Parameters without a gradient keep their moments.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (id, grad) in grads {
            let i = id.index();
            if store.param(*id).kind != ParamKind::Trainable {
                continue;
            }
            if !grad.is_finite() {
                return Err(ReidError::Numerical(format!(
                    "non-finite gradient for {}",
                    store.param(*id).name
                )));
            }
            let (b1, b2, wd) = (self.beta1, self.beta2, self.weight_decay);
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = store.get_mut(*id).data_mut();
            for k in 0..p.len() {
                let gk = grad.data()[k] + wd * p[k];
                m[k] = b1 * m[k] + (1.0 - b1) * gk;
                v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
                p[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}
