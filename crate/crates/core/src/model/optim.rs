//! Adam with decoupled weight decay and a linear warmup.

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use super::ModelError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.2,
            warmup_steps: 100,
        }
    }
}

impl AdamConfig {
    /// Learning rate for 1-based step `t`: `lr·t/warmup` during warmup.
    pub fn lr_at(&self, t: u64) -> f64 {
        if self.warmup_steps == 0 || t >= self.warmup_steps {
            self.lr
        } else {
            self.lr * t as f64 / self.warmup_steps as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(&p.shape)).collect();
        OptimizerState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

fn check_shape(expected: &Tensor, found: &Tensor) -> Result<(), ModelError> {
    if expected.shape == found.shape {
        Ok(())
    } else {
        Err(ModelError::ShapeMismatch {
            expected: expected.shape.clone(),
            found: found.shape.clone(),
        })
    }
}

/// One bias-corrected Adam step. Parameters flagged in `decay` first shrink
/// by `1 − lr_eff·weight_decay`. Returns the effective learning rate.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    decay: &[bool],
    state: &mut OptimizerState,
    config: &AdamConfig,
) -> Result<f64, ModelError> {
    let n = params.len();
    if grads.len() != n || decay.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(ModelError::ShapeMismatch {
            expected: vec![n],
            found: vec![grads.len()],
        });
    }
    for i in 0..n {
        check_shape(&params[i], &grads[i])?;
        check_shape(&params[i], &state.m[i])?;
        check_shape(&params[i], &state.v[i])?;
    }

    state.step += 1;
    let t = state.step;
    let lr = config.lr_at(t);
    let bc1 = 1.0 - config.beta1.powi(t.min(i32::MAX as u64) as i32);
    let bc2 = 1.0 - config.beta2.powi(t.min(i32::MAX as u64) as i32);
    for i in 0..n {
        let shrink = if decay[i] {
            1.0 - lr * config.weight_decay
        } else {
            1.0
        };
        let (p, g) = (&mut params[i].data, &grads[i].data);
        let (m, v) = (&mut state.m[i].data, &mut state.v[i].data);
        for k in 0..p.len() {
            p[k] *= shrink;
            m[k] = config.beta1 * m[k] + (1.0 - config.beta1) * g[k];
            v[k] = config.beta2 * v[k] + (1.0 - config.beta2) * g[k] * g[k];
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            p[k] -= lr * m_hat / (v_hat.sqrt() + config.eps);
        }
    }
    Ok(lr)
}
