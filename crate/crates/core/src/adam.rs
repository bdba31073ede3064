use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParameterSet;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second moment accumulators, shape-aligned with a [`ParameterSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: Vec<Vec<f32>>,
    pub second_moment: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(params: &ParameterSet, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f32>> = params.iter().map(|p| vec![0.0; p.tensor.len()]).collect();
        Self {
            config,
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    pub fn reset(&mut self) {
        self.step = 0;
        for m in self.first_moment.iter_mut().chain(self.second_moment.iter_mut()) {
            m.fill(0.0);
        }
    }

    pub fn is_aligned(&self, params: &ParameterSet) -> bool {
        self.first_moment.len() == params.len()
            && self.second_moment.len() == params.len()
            && params
                .iter()
                .zip(self.first_moment.iter().zip(&self.second_moment))
                .all(|(p, (m, v))| m.len() == p.tensor.len() && v.len() == p.tensor.len())
    }
}

/// One bias-corrected Adam update. Non-finite gradients abort the update
/// before any parameter or moment is touched.
pub fn adam_step(params: &mut ParameterSet, grads: &[Tensor<f32>], state: &mut AdamState) -> Result<()> {
    if grads.len() != params.len() || !state.is_aligned(params) {
        return Err(Error::Misaligned(format!(
            "{} gradients / optimizer state for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if g.shape() != p.tensor.shape() {
            return Err(Error::Misaligned(format!(
                "gradient shape {:?} for `{}` of shape {:?}",
                g.shape(),
                p.name,
                p.tensor.shape()
            )));
        }
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient { name: p.name.clone() });
        }
    }

    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
    let (lr, eps) = (c.learning_rate, c.epsilon);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.first_moment.iter_mut().zip(state.second_moment.iter_mut()))
    {
        for (((w, &gi), mi), vi) in p
            .tensor
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let m_hat = *mi as f64 / bc1;
            let v_hat = *vi as f64 / bc2;
            *w -= (lr * m_hat / (v_hat.sqrt() + eps)) as f32;
        }
    }
    Ok(())
}
