//! Optimisers with decoupled weight decay and the warm-up + cosine schedule.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

/// Linear warm-up from `start` to `base`, then cosine decay to `min`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarmupCosine {
    pub base: f64,
    pub start: f64,
    pub min: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl WarmupCosine {
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.start + (self.base - self.start) * step as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.min + 0.5 * (self.base - self.min) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// SGD with heavy-ball momentum and decoupled weight decay:
/// `p ← p − lr·wd·p`, `v ← μ·v + g`, `p ← p − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: HashMap<String, Vec<f32>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: HashMap::new(),
        }
    }

    pub fn update(&mut self, name: &str, param: &mut [f32], grad: &[f32], lr: f64) {
        let v = self
            .velocity
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; param.len()]);
        let decay = (1.0 - lr * self.weight_decay) as f32;
        let (mu, lr) = (self.momentum as f32, lr as f32);
        for ((p, &g), v) in param.iter_mut().zip(grad).zip(v.iter_mut()) {
            *v = mu * *v + g;
            *p = *p * decay - lr * *v;
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: HashMap<String, (Vec<f32>, Vec<f32>)>,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            moments: HashMap::new(),
        }
    }

    /// Advance the shared step counter; call once before the updates of a step.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn update(&mut self, name: &str, param: &mut [f32], grad: &[f32], lr: f64) {
        assert!(self.step > 0, "begin_step must precede update");
        let (m, v) = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (vec![0.0; param.len()], vec![0.0; param.len()]));
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let decay = (1.0 - lr * self.weight_decay) as f32;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        for i in 0..param.len() {
            let g = grad[i];
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let mhat = m[i] as f64 / c1;
            let vhat = v[i] as f64 / c2;
            param[i] = param[i] * decay - (lr * mhat / (vhat.sqrt() + self.eps)) as f32;
        }
    }
}

/// Either optimiser behind one interface.
#[derive(Clone, Debug)]
pub enum Optimizer {
    Sgd(Sgd),
    AdamW(AdamW),
}

impl Optimizer {
    pub fn begin_step(&mut self) {
        if let Optimizer::AdamW(o) = self {
            o.begin_step();
        }
    }

    pub fn update(&mut self, name: &str, param: &mut [f32], grad: &[f32], lr: f64) {
        match self {
            Optimizer::Sgd(o) => o.update(name, param, grad, lr),
            Optimizer::AdamW(o) => o.update(name, param, grad, lr),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let s = WarmupCosine {
            base: 0.01,
            start: 1e-6,
            min: 0.0,
            warmup_steps: 10,
            total_steps: 100,
        };
        assert_eq!(s.lr(0), 1e-6);
        assert!((s.lr(10) - 0.01).abs() < 1e-15);
        for i in 0..10 {
            assert!(s.lr(i + 1) > s.lr(i));
        }
        for i in 10..100 {
            assert!(s.lr(i + 1) <= s.lr(i));
        }
        assert!(s.lr(100).abs() < 1e-15);
    }

    #[test]
    fn adamw_zero_grad_only_decays() {
        let mut o = AdamW::new(0.9, 0.999, 1e-8, 0.05);
        let mut p = vec![1.0f32, -2.0];
        o.begin_step();
        o.update("w", &mut p, &[0.0, 0.0], 0.1);
        let d = 1.0 - 0.1 * 0.05;
        assert_eq!(p, vec![d as f32, -2.0 * d as f32]);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut o = Sgd::new(0.9, 0.0);
        let mut p = vec![0.0f32];
        o.update("w", &mut p, &[1.0], 0.1);
        o.update("w", &mut p, &[1.0], 0.1);
        assert!((p[0] - -(0.1 + 0.19)).abs() < 1e-6);
    }
}
