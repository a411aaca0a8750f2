//! Adaptive-moment (Adam) optimizer with bias correction.

use serde::{Deserialize, Serialize};

use crate::network::ModelParams;
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment estimates aligned with [`ModelParams::named_params`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(params: &ModelParams<f32>) -> Self {
        let zeros: Vec<Vec<f32>> = params
            .named_params()
            .iter()
            .map(|(_, p)| vec![0.0; p.len()])
            .collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Shape-compatible with `params`.
    pub fn matches(&self, params: &ModelParams<f32>) -> bool {
        let named = params.named_params();
        named.len() == self.m.len()
            && named.len() == self.v.len()
            && named
                .iter()
                .zip(self.m.iter().zip(&self.v))
                .all(|((_, p), (m, v))| m.len() == p.len() && v.len() == p.len())
    }
}

pub struct Adam {
    pub config: AdamConfig,
    pub state: AdamState,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ModelParams<f32>) -> Self {
        Adam {
            config,
            state: AdamState::new(params),
        }
    }

    pub fn step(&mut self, params: &mut ModelParams<f32>, grads: &ModelParams<f32>) {
        let c = self.config;
        self.state.step += 1;
        let t = self.state.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let lr = c.learning_rate;
        let named_grads = grads.named_params();
        for (((_, p), (_, g)), (m, v)) in params
            .named_params_mut()
            .into_iter()
            .zip(named_grads)
            .zip(self.state.m.iter_mut().zip(self.state.v.iter_mut()))
        {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let m_hat = m[i] as f64 / bc1;
                let v_hat = v[i] as f64 / bc2;
                let update = lr * m_hat / (v_hat.sqrt() + c.epsilon);
                p.data[i] -= f32::lit(update);
            }
        }
    }
}
