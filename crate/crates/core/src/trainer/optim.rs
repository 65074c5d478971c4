use serde::{Deserialize, Serialize};

use crate::diffcore::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay applied to matrices only.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moments, one buffer per parameter in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(store: &ParamStore<f32>) -> Self {
        let zeros: Vec<Vec<f32>> = store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One AdamW update from the gradients held in `store`.
    pub fn update(&mut self, store: &mut ParamStore<f32>, cfg: &AdamConfig, lr: f64) {
        self.step += 1;
        let t = self.step as f64;
        let c1 = 1.0 - cfg.beta1.powf(t);
        let c2 = 1.0 - cfg.beta2.powf(t);
        for (k, (_, p)) in store.iter_mut().enumerate() {
            let decay = if p.value.shape().len() >= 2 {
                cfg.weight_decay
            } else {
                0.0
            };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let grads = p.grad.data().to_vec();
            for (i, (w, g)) in p.value.data_mut().iter_mut().zip(grads).enumerate() {
                let g = f64::from(g);
                let mi = cfg.beta1 * f64::from(m[i]) + (1.0 - cfg.beta1) * g;
                let vi = cfg.beta2 * f64::from(v[i]) + (1.0 - cfg.beta2) * g * g;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let wi = f64::from(*w);
                let step = lr * ((mi / c1) / ((vi / c2).sqrt() + cfg.eps) + decay * wi);
                *w = (wi - step) as f32;
            }
        }
    }
}

/// `lr · gamma^(epoch / every)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StepDecay {
    /// Epochs between decays; 0 keeps the rate constant.
    pub every: usize,
    pub gamma: f64,
}

impl Default for StepDecay {
    fn default() -> Self {
        Self { every: 100, gamma: 0.5 }
    }
}

impl StepDecay {
    pub fn rate(&self, base: f64, epoch: usize) -> f64 {
        if self.every == 0 {
            return base;
        }
        base * self.gamma.powi((epoch / self.every) as i32)
    }
}
