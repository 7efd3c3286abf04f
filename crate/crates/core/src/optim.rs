use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::params::{EntryKind, ParamId, ParamStore};

/// Step-wise learning-rate decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f32,
    /// Iterations after which the rate is multiplied by `factor`.
    pub milestones: Vec<usize>,
    pub factor: f32,
}

impl LrSchedule {
    /// Two decays at 50% and 75% of the budget.
    pub fn standard(initial: f32, total_iters: usize) -> Self {
        Self {
            initial,
            milestones: vec![total_iters / 2, total_iters * 3 / 4],
            factor: 0.1,
        }
    }

    pub fn validate(&self, total_iters: usize) -> Result<()> {
        if !(self.initial > 0.0) {
            return config_err("lr.initial must be positive");
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return config_err("lr.milestones must be strictly increasing");
        }
        if self.milestones.last().is_some_and(|&m| m >= total_iters) {
            return config_err("lr.milestones must be below total_iters");
        }
        Ok(())
    }

    pub fn at(&self, iter: usize) -> f32 {
        let decays = self.milestones.iter().filter(|&&m| iter >= m).count();
        self.initial * self.factor.powi(decays as i32)
    }
}

/// SGD with momentum and L2 weight decay:
/// `v ← μ·v + g + λ·w`, `w ← w − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: HashMap<ParamId, Vec<f32>>,
}

impl Sgd {
    pub fn new(momentum: f32, weight_decay: f32) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: HashMap::new(),
        }
    }

    /// Updates every trainable, unfrozen parameter and clears all gradients.
    /// A missing gradient counts as zero.
    pub fn step(&mut self, store: &mut ParamStore, lr: f32) {
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            if store.kind(id) != EntryKind::Param || !store.get(id).requires_grad {
                continue;
            }
            let t = store.get_mut(id);
            let grad = t.grad.take();
            let v = self
                .velocity
                .entry(id)
                .or_insert_with(|| vec![0.0; t.numel()]);
            let w = t.data_mut();
            for i in 0..w.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[i]);
                v[i] = self.momentum * v[i] + g + self.weight_decay * w[i];
                w[i] -= lr * v[i];
            }
        }
        store.zero_grads();
    }
}
