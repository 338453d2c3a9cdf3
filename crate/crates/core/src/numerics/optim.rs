use serde::{Deserialize, Serialize};

use super::{Gradients, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Adam hyper-parameters. The learning rate is supplied per step by the
/// schedule, so it is not part of this struct.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
        }
    }
}

/// Moments and step count of a single parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Tensor,
    pub v: Tensor,
    pub t: u64,
}

impl AdamState {
    pub fn new(shape: &[usize]) -> Self {
        Self {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of `param` using its gradient slot.
pub fn adam_step(param: &mut Tensor, state: &mut AdamState, cfg: &AdamConfig, lr: f64) -> Result<()> {
    let grad = param
        .grad()
        .ok_or_else(|| Error::Usage("adam_step on a tensor without a gradient".into()))?
        .to_vec();
    apply(param, &grad, state, cfg, lr)
}

fn apply(param: &mut Tensor, grad: &[f64], state: &mut AdamState, cfg: &AdamConfig, lr: f64) -> Result<()> {
    if state.m.shape() != param.shape() || grad.len() != param.len() {
        return Err(Error::shape("adam_step", param.shape(), state.m.shape()));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let m = state.m.data_mut();
    let v = state.v.data_mut();
    for (i, p) in param.data_mut().iter_mut().enumerate() {
        let g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let mhat = m[i] / c1;
        let vhat = v[i] / c2;
        *p -= lr * mhat / (vhat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Adam over a whole [`ParamStore`]. Parameters without a gradient in a step
/// are left untouched, including their moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    states: Vec<AdamState>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let states = store.iter().map(|(_, _, t)| AdamState::new(t.shape())).collect();
        Self { config, states }
    }

    pub fn from_states(config: AdamConfig, states: Vec<AdamState>) -> Self {
        Self { config, states }
    }

    pub fn states(&self) -> &[AdamState] {
        &self.states
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) -> Result<()> {
        if grads.len() != store.len() || self.states.len() != store.len() {
            return Err(Error::Usage("gradient set does not match parameter store".into()));
        }
        for (id, g) in grads.iter() {
            if let Some(g) = g {
                apply(store.get_mut(id), g, &mut self.states[id.index()], &self.config, lr)?;
            }
        }
        Ok(())
    }
}
