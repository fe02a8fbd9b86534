use serde::{Deserialize, Serialize};

use crate::autodiff::params::{Bound, ParamKind, ParamStore};
use crate::autodiff::tape::Grads;
use crate::scalar::Scalar;

/// Cosine-annealed learning rate with optional linear warm-up.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup: usize,
    pub total: usize,
}

impl CosineSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.base_lr * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.total.saturating_sub(self.warmup).max(1);
        let progress = ((step - self.warmup) as f64 / span as f64).min(1.0);
        self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Adam with decoupled weight decay. Decay applies to weight and embedding
/// matrices only.
#[derive(Clone, Debug)]
pub struct AdamW<S> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
    step: u64,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            clip_norm: Some(1.0),
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore<S>, bound: &Bound, grads: &Grads<S>, lr: f64) {
        while self.m.len() < store.len() {
            let n = store.entries()[self.m.len()].tensor.numel();
            self.m.push(vec![S::zero(); n]);
            self.v.push(vec![S::zero(); n]);
        }
        self.step += 1;
        let clip = match self.clip_norm {
            Some(max) => {
                let norm = store.grad_norm(bound, grads).as_f64();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (S::lit(self.beta1), S::lit(self.beta2));
        let (one_b1, one_b2) = (S::lit(1.0 - self.beta1), S::lit(1.0 - self.beta2));
        let step_size = S::lit(lr / bc1);
        let bc2_sqrt = S::lit(bc2.sqrt());
        let eps = S::lit(self.eps);
        let clip = S::lit(clip);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(g) = grads.raw(bound[id]) else { continue };
            let decays = matches!(store.entry(id).kind, ParamKind::Weight | ParamKind::Embedding);
            let decay = S::lit(1.0 - lr * self.weight_decay);
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g[i] * clip;
                m[i] = b1 * m[i] + one_b1 * gi;
                v[i] = b2 * v[i] + one_b2 * gi * gi;
                if decays {
                    p[i] *= decay;
                }
                p[i] -= step_size * m[i] / (v[i].sqrt() / bc2_sqrt + eps);
            }
        }
    }
}
