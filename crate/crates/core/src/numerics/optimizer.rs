//! AdamW with decoupled weight decay and bias correction.

use crate::error::{Error, Result};
use crate::numerics::autodiff::TrainableParam;
use crate::numerics::tensor::Tensor;

/// Optimizer hyperparameters. The defaults follow common AdamW practice;
/// only the learning rate is configured per run.
#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Per-parameter moment buffers plus the shared hyperparameters.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub m: Tensor,
    pub v: Tensor,
    pub t: u64,
    pub config: AdamWConfig,
}

impl OptimizerState {
    pub fn new(shape: &[usize], config: AdamWConfig) -> OptimizerState {
        OptimizerState {
            m: Tensor::zeros(shape.to_vec()),
            v: Tensor::zeros(shape.to_vec()),
            t: 0,
            config,
        }
    }
}

/// One AdamW update. Weight decay is decoupled: the parameter is shrunk
/// by `lr * weight_decay` before the moment-based step.
pub fn adamw_step(state: &mut OptimizerState, param: &mut TrainableParam) -> Result<()> {
    if state.m.shape() != param.value.shape() || state.v.shape() != param.value.shape() {
        return Err(Error::StateUninitialized(param.id.clone()));
    }
    if param.grad.shape() != param.value.shape() {
        return Err(Error::StateUninitialized(format!(
            "{}: gradient shape differs from value shape",
            param.id
        )));
    }
    let c = state.config;
    state.t += 1;
    let bc1 = 1.0 - c.beta1.powi(state.t as i32);
    let bc2 = 1.0 - c.beta2.powi(state.t as i32);

    let value = param.value.data_mut();
    let grad = param.grad.data();
    let m = state.m.data_mut();
    let v = state.v.data_mut();
    for i in 0..value.len() {
        value[i] *= 1.0 - c.learning_rate * c.weight_decay;
        let g = grad[i];
        m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
        v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        value[i] -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
    }
    Ok(())
}
