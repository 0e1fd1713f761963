use std::collections::BTreeMap;

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::Array;

pub type GradMap = BTreeMap<String, Array>;

/// AdamW moments.
#[derive(Clone, Debug, Default)]
pub struct OptimizerState {
    pub m: BTreeMap<String, Array>,
    pub v: BTreeMap<String, Array>,
    pub step: u64,
}

pub fn global_norm(grads: &GradMap) -> f64 {
    grads.values().map(Array::norm_sq).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_gradients(grads: &mut GradMap, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.scale_in_place(s);
        }
    }
    norm
}

/// One AdamW update with weight decay applied directly to the weights.
pub fn optimizer_step(params: &mut ModelParams, grads: &GradMap, state: &mut OptimizerState, cfg: &TrainConfig) -> Result<()> {
    for (name, p) in params.tensors() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::invalid(format!("no gradient for `{name}`")))?;
        if g.shape() != p.shape() {
            return Err(Error::shape("optimizer_step", format!("gradient of `{name}` is {:?}", g.shape())));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let decay = 1.0 - cfg.lr * cfg.weight_decay;
    for (name, p) in params.tensors_mut() {
        let g = &grads[name];
        let m = state.m.entry(name.to_string()).or_insert_with(|| Array::zeros_like(p));
        let v = state.v.entry(name.to_string()).or_insert_with(|| Array::zeros_like(p));
        let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
        for (k, &gk) in g.data().iter().enumerate() {
            md[k] = b1 * md[k] + (1.0 - b1) * gk;
            vd[k] = b2 * vd[k] + (1.0 - b2) * gk * gk;
            let update = (md[k] / bc1) / ((vd[k] / bc2).sqrt() + cfg.adam_eps);
            pd[k] = pd[k] * decay - cfg.lr * update;
        }
    }
    Ok(())
}
