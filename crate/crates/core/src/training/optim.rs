//! AdamW, the warmup/decay learning-rate schedule and gradient clipping.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_iters: u64,
    pub max_iters: u64,
}

impl Schedule {
    /// Linear warmup to `base_lr` over `warmup_iters`, then
    /// `base_lr · (1 - (t - T_w)/T_max)^0.9`, clamped at zero.
    pub fn lr_at(&self, t: u64) -> f64 {
        if self.warmup_iters > 0 && t <= self.warmup_iters {
            return t as f64 * self.base_lr / self.warmup_iters as f64;
        }
        let base = 1.0 - (t - self.warmup_iters) as f64 / self.max_iters.max(1) as f64;
        if base <= 0.0 {
            0.0
        } else {
            self.base_lr * base.powf(0.9)
        }
    }
}

pub fn lr_at(schedule: &Schedule, t: u64) -> f64 {
    schedule.lr_at(t)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moments per parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub steps: u64,
    pub moments: BTreeMap<ParamId, (Tensor, Tensor)>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            steps: 0,
            moments: BTreeMap::new(),
        }
    }

    /// One update of every trainable parameter; frozen ones are not touched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<ParamId, Tensor>, lr: f64) -> Result<()> {
        for id in store.ids().collect::<Vec<_>>() {
            if store.is_trainable(id) && !grads.contains_key(&id) {
                return Err(Error::MissingGrad(store.get(id).name.clone()));
            }
        }
        self.steps += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.steps as i32);
        let bc2 = 1.0 - beta2.powi(self.steps as i32);
        for (&id, g) in grads {
            if !store.is_trainable(id) {
                continue;
            }
            let n = g.numel();
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            let p = store.value_mut(id);
            if p.numel() != n {
                return Err(Error::shape("adamw", p.shape(), g.shape()));
            }
            let (pd, gd) = (p.data_mut(), g.data());
            let (md, vd) = (m.data_mut(), v.data_mut());
            for i in 0..n {
                md[i] = beta1 * md[i] + (1.0 - beta1) * gd[i];
                vd[i] = beta2 * vd[i] + (1.0 - beta2) * gd[i] * gd[i];
            }
            let vd = &*vd;
            for i in 0..n {
                pd[i] -= lr * weight_decay * pd[i];
                let mh = md[i] / bc1;
                let vh = vd[i] / bc2;
                pd[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

pub fn optimizer_step(
    opt: &mut AdamW,
    store: &mut ParamStore,
    grads: &BTreeMap<ParamId, Tensor>,
    lr: f64,
) -> Result<()> {
    opt.step(store, grads, lr)
}

pub fn global_norm(grads: &BTreeMap<ParamId, Tensor>) -> f64 {
    grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<ParamId, Tensor>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}
