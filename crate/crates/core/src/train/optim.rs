use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ClassifierModel;
use crate::train::backward::GradientSet;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Learning rate decaying linearly from `initial` at step 0 to zero at the
/// final step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearDecay {
    pub initial: f64,
    pub total_steps: usize,
}

impl LinearDecay {
    pub fn lr(&self, step: usize) -> f64 {
        if self.total_steps <= 1 {
            return self.initial;
        }
        let last = (self.total_steps - 1) as f64;
        self.initial * ((last - step as f64) / last).max(0.0)
    }
}

/// First and second moments per trainable tensor plus the step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: usize,
}

impl AdamState {
    pub fn new(model: &ClassifierModel) -> Self {
        let zeros: Vec<Vec<f64>> = model
            .trainable()
            .iter()
            .map(|(_, t)| vec![0.0; t.len()])
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of a flat tensor. `t` counts from 1.
pub fn adam_update(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: usize,
    lr: f64,
) {
    let c1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(t as i32);
    for k in 0..param.len() {
        let g = grad[k];
        m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * g;
        v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * g * g;
        let mhat = m[k] / c1;
        let vhat = v[k] / c2;
        param[k] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
    }
}

/// Apply one Adam step with the scheduled learning rate and advance the
/// state. Returns the learning rate used.
pub fn optimizer_step(
    model: &mut ClassifierModel,
    grads: &GradientSet,
    state: &mut AdamState,
    schedule: &LinearDecay,
) -> Result<f64> {
    let lr = schedule.lr(state.step);
    state.step += 1;
    let t = state.step;
    let mut params = model.trainable_mut();
    if params.len() != grads.len() || state.m.len() != grads.len() {
        return Err(Error::shape(
            "optimizer_step",
            format!("{} tensors, {} gradients", params.len(), grads.len()),
        ));
    }
    for (k, ((name, p), (gname, g))) in params.iter_mut().zip(&grads.entries).enumerate() {
        if name != gname || p.len() != g.len() {
            return Err(Error::shape(
                "optimizer_step",
                format!("{name} vs gradient {gname}"),
            ));
        }
        adam_update(p, g, &mut state.m[k], &mut state.v[k], t, lr);
    }
    Ok(lr)
}
