//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::model::ModelParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr.is_finite()
            && self.lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.weight_decay.is_finite()
            && self.weight_decay >= 0.0
            && self.eps > 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// First and second moments for one tensor.
#[derive(Debug, Clone, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    decay: bool,
}

/// Optimizer state, one entry per trainable tensor of [`ModelParams`].
///
/// Corrections are not model parameters, so they never get an entry here.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: OptimizerConfig,
    state: Vec<Moments>,
    step: u64,
}

impl AdamW {
    /// Weight decay applies to 2-D weight matrices; biases and norm gains are exempt.
    pub fn new(config: OptimizerConfig, params: &ModelParams) -> Result<Self> {
        config.validate()?;
        let state = params
            .tensors()
            .iter()
            .map(|t| Moments {
                m: vec![0.0; t.len()],
                v: vec![0.0; t.len()],
                decay: t.rows() > 1 && t.cols() > 1,
            })
            .collect();
        Ok(Self { config, state, step: 0 })
    }

    pub fn state_len(&self) -> usize {
        self.state.len()
    }

    /// Number of scalar entries tracked (each with two moments).
    pub fn tracked_entries(&self) -> usize {
        self.state.iter().map(|s| s.m.len()).sum()
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ModelParams, grad: &ModelParams) -> Result<()> {
        let c = self.config;
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let grads = grad.tensors();
        let tensors = params.tensors_mut();
        if tensors.len() != self.state.len() || grads.len() != self.state.len() {
            return Err(Error::dim("optimizer state does not match the parameter list"));
        }
        for ((p, g), st) in tensors.into_iter().zip(grads).zip(&mut self.state) {
            let decay = if st.decay { c.lr * c.weight_decay } else { 0.0 };
            let values = p.as_mut_slice();
            for (i, &gi) in g.as_slice().iter().enumerate() {
                st.m[i] = c.beta1 * st.m[i] + (1.0 - c.beta1) * gi;
                st.v[i] = c.beta2 * st.v[i] + (1.0 - c.beta2) * gi * gi;
                let update = (st.m[i] / bc1) / ((st.v[i] / bc2).sqrt() + c.eps);
                values[i] -= decay * values[i] + c.lr * update;
            }
        }
        Ok(())
    }
}
