use serde::{Deserialize, Serialize};

use super::params::{ParamGrads, ParamStore};
use super::{Real, Tensor};
use crate::error::{CareError, Result};

/// AdamW hyperparameters shared by every parameter group.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip threshold; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(2.0),
        }
    }
}

/// Learning rate and weight decay for one parameter group at one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hyper {
    pub lr: f64,
    pub weight_decay: f64,
}

/// Linear warmup to `peak`, then cosine decay to `end`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub peak: f64,
    pub end: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn constant(value: f64) -> Self {
        Self {
            peak: value,
            end: value,
            warmup_steps: 0,
            total_steps: 1,
        }
    }

    pub fn at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let t = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        cosine_ramp(self.peak, self.end, t)
    }
}

/// Cosine interpolation from `start` (t = 0) to `end` (t = 1).
pub fn cosine_ramp(start: f64, end: f64, t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    end + (start - end) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// First and second moment accumulators plus the step counter.
#[derive(Clone, Debug)]
pub struct OptimizerState<T> {
    m: Vec<Option<Tensor<T>>>,
    v: Vec<Option<Tensor<T>>>,
    step: u64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        Self {
            m: vec![None; store.len()],
            v: vec![None; store.len()],
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// Scales `grads` in place so their global ℓ2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut ParamGrads<T>, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(T::c(max_norm / norm));
    }
    norm
}

/// One decoupled-weight-decay Adam step.
///
/// `hyper` maps a parameter group name to its learning rate and weight decay
/// for this step; returning `None` freezes the group (no update, no moment
/// change). Clipping is applied to the gradients of non-frozen groups before
/// the update. A non-finite gradient aborts the step before anything is
/// modified. Returns the pre-clip global gradient norm.
pub fn adamw_step<T: Real>(
    store: &mut ParamStore<T>,
    grads: &ParamGrads<T>,
    state: &mut OptimizerState<T>,
    cfg: &AdamW,
    hyper: impl Fn(&str) -> Option<Hyper>,
) -> Result<f64> {
    if grads.len() != store.len() {
        return Err(CareError::contract("gradient table does not match parameter store"));
    }
    let mut active = ParamGrads::new(store.len());
    for (id, g) in grads.iter() {
        if g.shape() != store.get(id).shape() {
            return Err(CareError::shape("adamw_step", format!("gradient shape for {}", store.name(id))));
        }
        if !g.is_finite() {
            return Err(CareError::NonFinite(format!("gradient of {}", store.name(id))));
        }
        if let Some(h) = hyper(store.group(id)) {
            if h.lr < 0.0 || !h.lr.is_finite() {
                return Err(CareError::contract(format!("invalid learning rate {}", h.lr)));
            }
            active.set(id, g.clone());
        }
    }
    let norm = match cfg.clip_norm {
        Some(c) => clip_grad_norm(&mut active, c),
        None => active.global_norm(),
    };
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2, eps) = (T::c(cfg.beta1), T::c(cfg.beta2), T::c(cfg.eps));
    for (id, g) in active.iter_mut() {
        let h = hyper(store.group(id)).expect("active group");
        let decay = if store.decays(id) { h.weight_decay } else { 0.0 };
        let m = state.m[id.0].get_or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state.v[id.0].get_or_insert_with(|| Tensor::zeros(g.shape()));
        let p = store.get_mut(id);
        let (lr, shrink) = (T::c(h.lr), T::c(1.0 - h.lr * decay));
        let (c1, c2) = (T::c(bc1), T::c(bc2));
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data().iter())
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
        {
            *mv = b1 * *mv + (T::one() - b1) * gv;
            *vv = b2 * *vv + (T::one() - b2) * gv * gv;
            let mhat = *mv / c1;
            let vhat = *vv / c2;
            *pv = *pv * shrink - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(norm)
}
