use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the number of steps taken.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    config: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len()
    {
        return Err(invalid("Adam buffers do not match the parameter count"));
    }
    if config.learning_rate <= 0.0 {
        return Err(invalid("learning rate must be positive"));
    }
    state.step += 1;
    let step = state.step as i32;
    let c1 = 1.0 - config.beta1.powi(step);
    let c2 = 1.0 - config.beta2.powi(step);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = config.beta1 * *m + (1.0 - config.beta1) * g;
        *v = config.beta2 * *v + (1.0 - config.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= config.learning_rate * m_hat / (v_hat.sqrt() + config.eps);
    }
    if params.iter().any(|p| !p.is_finite()) {
        return Err(Error::NumericFailure(format!(
            "non-finite parameter after Adam step {step}"
        )));
    }
    Ok(())
}
