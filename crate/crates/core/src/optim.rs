//! Adam with global gradient-norm clipping over every trainable parameter.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::ParamStore;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub first_moment: BTreeMap<String, Tensor>,
    pub second_moment: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new() -> Self {
        Self {
            step: 0,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        }
    }

    pub fn deep_clone(&self) -> Result<Self> {
        let copy = |m: &BTreeMap<String, Tensor>| -> Result<BTreeMap<String, Tensor>> {
            m.iter().map(|(k, v)| Ok((k.clone(), v.copy()?))).collect()
        };
        Ok(Self {
            step: self.step,
            first_moment: copy(&self.first_moment)?,
            second_moment: copy(&self.second_moment)?,
        })
    }
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new()
    }
}

/// Global L2 norm of all available gradients.
pub fn gradient_norm(store: &ParamStore, grads: &GradStore) -> Result<f64> {
    let mut sq = 0.0f64;
    for var in store.params().values() {
        if let Some(g) = grads.get(var.as_tensor()) {
            sq += g.sqr()?.sum_all()?.to_scalar::<f32>()? as f64;
        }
    }
    Ok(sq.sqrt())
}

/// One clipped Adam update. Parameters without a gradient are untouched.
/// Returns the pre-clipping gradient norm.
pub fn adam_step(
    store: &ParamStore,
    grads: &GradStore,
    state: &mut AdamState,
    learning_rate: f64,
    max_grad_norm: f64,
) -> Result<f64> {
    let norm = gradient_norm(store, grads)?;
    if !norm.is_finite() {
        return Err(Error::GradientOverflow(format!("gradient norm {norm}")));
    }
    let scale = if norm > max_grad_norm {
        max_grad_norm / (norm + 1e-6)
    } else {
        1.0
    };
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);
    for (name, var) in store.params() {
        let Some(g) = grads.get(var.as_tensor()) else {
            continue;
        };
        // detached so moments never keep a backward graph alive
        let g = (g.detach() * scale)?;
        let m = match state.first_moment.get(name) {
            Some(m) => ((m * BETA1)? + (&g * (1.0 - BETA1))?)?,
            None => (&g * (1.0 - BETA1))?,
        };
        let v = match state.second_moment.get(name) {
            Some(v) => ((v * BETA2)? + (g.sqr()? * (1.0 - BETA2))?)?,
            None => (g.sqr()? * (1.0 - BETA2))?,
        };
        let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + EPS)?)?;
        let next = (var.as_tensor().detach() - (update * learning_rate)?)?;
        var.set(&next)?;
        state.first_moment.insert(name.clone(), m.detach());
        state.second_moment.insert(name.clone(), v.detach());
    }
    Ok(norm)
}
