//! Uncentered RMSprop without momentum.

use serde::{Deserialize, Serialize};

use crate::error::{HgError, Result};
use crate::params::ParamStore;
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmspropConfig {
    pub lr: f64,
    pub decay: f64,
    pub eps: f64,
}

impl Default for RmspropConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            decay: 0.99,
            eps: 1e-8,
        }
    }
}

impl RmspropConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(HgError::config(format!("learning_rate must be nonnegative, got {}", self.lr)));
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return Err(HgError::config(format!("rmsprop_decay must lie in (0, 1), got {}", self.decay)));
        }
        if !(self.eps >= 0.0) {
            return Err(HgError::config(format!("rmsprop_eps must be nonnegative, got {}", self.eps)));
        }
        Ok(())
    }
}

/// Squared-gradient accumulators, one per trainable tensor in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct RmspropState<T> {
    pub step: u64,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> RmspropState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        Self {
            step: 0,
            v: store
                .trainable_ids()
                .map(|id| vec![T::zero(); store.tensor(id).numel()])
                .collect(),
        }
    }
}

/// `v ← d·v + (1−d)·g²;  θ ← θ − lr·g/(√v + eps)`, elementwise.
pub fn rmsprop_update<T: Real>(theta: &mut [T], v: &mut [T], g: &[T], cfg: &RmspropConfig) {
    let (lr, d, eps) = (T::of(cfg.lr), T::of(cfg.decay), T::of(cfg.eps));
    let keep = T::one() - d;
    for ((t, v), g) in theta.iter_mut().zip(v.iter_mut()).zip(g) {
        *v = d * *v + keep * *g * *g;
        *t -= lr * *g / (v.sqrt() + eps);
    }
}

/// Applies one step using the gradients stored on the store's tensors.
/// Missing gradients count as zero. Nothing is modified if any gradient is
/// non-finite.
pub fn rmsprop_step<T: Real>(store: &mut ParamStore<T>, state: &mut RmspropState<T>, cfg: &RmspropConfig) -> Result<()> {
    let ids: Vec<_> = store.trainable_ids().collect();
    if ids.len() != state.v.len() {
        return Err(HgError::config(format!(
            "optimizer state tracks {} tensors, store has {}",
            state.v.len(),
            ids.len()
        )));
    }
    for id in &ids {
        if let Some(g) = store.tensor(*id).grad() {
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(HgError::Training(format!(
                    "non-finite gradient in {} at element {i}",
                    store.name(*id)
                )));
            }
        }
    }
    for (k, id) in ids.into_iter().enumerate() {
        let t = store.tensor_mut(id);
        let g = t.take_grad().unwrap_or_else(|| vec![T::zero(); t.numel()]);
        if g.len() != state.v[k].len() {
            return Err(HgError::config("optimizer state shape mismatch"));
        }
        rmsprop_update(t.data_mut(), &mut state.v[k], &g, cfg);
        t.set_grad(g).expect("same length");
    }
    state.step += 1;
    Ok(())
}
