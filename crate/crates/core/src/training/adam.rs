use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

/// Adam hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let betas_ok = (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2);
        if !betas_ok || !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid(
                "Adam betas must lie in [0, 1) and epsilon be positive",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            first: vec![0.0; len],
            second: vec![0.0; len],
            step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.first.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first.is_empty()
    }
}

/// One bias-corrected Adam update. Pure: returns the new state and parameters.
pub fn adam_step(
    state: &AdamState,
    theta: &[f64],
    grad: &[f64],
    lr: f64,
    cfg: &AdamConfig,
) -> Result<(AdamState, Vec<f64>)> {
    if theta.len() != grad.len() {
        return Err(Error::LengthMismatch {
            left: theta.len(),
            right: grad.len(),
        });
    }
    if state.len() != theta.len() || state.second.len() != theta.len() {
        return Err(Error::LengthMismatch {
            left: state.len(),
            right: theta.len(),
        });
    }
    let step = state.step + 1;
    let bc1 = 1.0 - libm::pow(cfg.beta1, step as f64);
    let bc2 = 1.0 - libm::pow(cfg.beta2, step as f64);
    let mut next = AdamState {
        first: Vec::with_capacity(theta.len()),
        second: Vec::with_capacity(theta.len()),
        step,
    };
    let mut updated = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let m = cfg.beta1 * state.first[i] + (1.0 - cfg.beta1) * grad[i];
        let v = cfg.beta2 * state.second[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
        let m_hat = m / bc1;
        let v_hat = v / bc2;
        updated.push(theta[i] - lr * m_hat / (libm::sqrt(v_hat) + cfg.epsilon));
        next.first.push(m);
        next.second.push(v);
    }
    Ok((next, updated))
}
