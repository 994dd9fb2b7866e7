//! Adam with global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::params::{Grads, ParamStore};
use crate::scalar::Real;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-4, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct Adam<T> {
    cfg: AdamConfig,
    m: Vec<Matrix<T>>,
    v: Vec<Matrix<T>>,
    t: i32,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros: Vec<Matrix<T>> = store.ids().map(|id| {
            let (r, c) = store.get(id).shape();
            Matrix::zeros(r, c)
        }).collect();
        Self { cfg, m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// One update. Parameters without a gradient are treated as having a zero
    /// gradient (their moments still decay).
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Grads<T>) {
        self.t += 1;
        let c = |x: f64| T::from_f64_lossy(x);
        let (b1, b2) = (c(self.cfg.beta1), c(self.cfg.beta2));
        let bc1 = c(1.0 - self.cfg.beta1.powi(self.t));
        let bc2 = c(1.0 - self.cfg.beta2.powi(self.t));
        let lr = c(self.cfg.learning_rate);
        let eps = c(self.cfg.epsilon);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let g = grads.get(id);
            let p = store.get_mut(id);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..p.len() {
                let gk = g.map_or(T::zero(), |g| g.as_slice()[k]);
                let mk = &mut m.as_mut_slice()[k];
                *mk = b1 * *mk + (T::one() - b1) * gk;
                let vk = &mut v.as_mut_slice()[k];
                *vk = b2 * *vk + (T::one() - b2) * gk * gk;
                let mhat = *mk / bc1;
                let vhat = *vk / bc2;
                p.as_mut_slice()[k] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut Grads<T>, max_norm: f64) -> T {
    let norm = grads.global_norm();
    let max = T::from_f64_lossy(max_norm);
    if norm > max {
        grads.scale(max / norm);
    }
    norm
}
