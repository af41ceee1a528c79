use std::collections::HashMap;

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use crate::graph::Gradients;

/// Adaptive-moment optimizer settings with warmup, optional cosine decay
/// and global-norm clipping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: usize,
    /// Cosine decay to zero over `total_steps` after warmup.
    pub cosine: bool,
    pub total_steps: usize,
    /// Clip the global gradient norm to this value; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps: 0,
            cosine: false,
            total_steps: 0,
            clip_norm: 1.0,
        }
    }
}

impl OptimConfig {
    pub fn with_lr(lr: f64) -> Self {
        OptimConfig {
            lr,
            ..Default::default()
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let warm = if self.warmup_steps > 0 && step < self.warmup_steps {
            (step + 1) as f64 / self.warmup_steps as f64
        } else {
            1.0
        };
        let decay = if self.cosine && self.total_steps > self.warmup_steps {
            let span = (self.total_steps - self.warmup_steps) as f64;
            let pos = (step.saturating_sub(self.warmup_steps) as f64 / span).min(1.0);
            0.5 * (1.0 + (std::f64::consts::PI * pos).cos())
        } else {
            1.0
        };
        self.lr * warm * decay
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepStats {
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    pub lr: f64,
}

/// Adam over one parameter store. Only trainable parameters that received
/// a gradient are touched.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: OptimConfig,
    step: usize,
    moments: HashMap<ParamId, (Array2<f64>, Array2<f64>)>,
}

impl Adam {
    pub fn new(config: OptimConfig) -> Self {
        Adam {
            config,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> StepStats {
        let ids: Vec<ParamId> = store
            .ids()
            .filter(|&id| store.is_trainable(id) && store.grad(grads, id).is_some())
            .collect();
        let norm = ids
            .iter()
            .map(|&id| store.grad(grads, id).unwrap().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let clip = if self.config.clip_norm > 0.0 && norm > self.config.clip_norm {
            self.config.clip_norm / norm
        } else {
            1.0
        };
        let lr = self.config.lr_at(self.step);
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2, eps) = (self.config.beta1, self.config.beta2, self.config.eps);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for id in ids {
            let g = store.grad(grads, id).unwrap();
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (Array2::zeros(g.dim()), Array2::zeros(g.dim())));
            Zip::from(&mut *m).and(&mut *v).and(g).for_each(|m, v, &g| {
                let g = g * clip;
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
            });
            if lr == 0.0 {
                continue;
            }
            let p = store.value_mut(id);
            Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                *p -= lr * (m / c1) / ((v / c2).sqrt() + eps);
            });
        }
        StepStats { grad_norm: norm, lr }
    }
}
