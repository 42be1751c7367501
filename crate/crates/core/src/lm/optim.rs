use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use super::{AdapterGrad, LowRankAdapter, ModelError};

/// AdamW with global-norm gradient clipping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    #[serde(default = "beta1")]
    pub beta1: f64,
    #[serde(default = "beta2")]
    pub beta2: f64,
    #[serde(default = "eps")]
    pub eps: f64,
    #[serde(default = "weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "max_grad_norm")]
    pub max_grad_norm: f64,
}

fn beta1() -> f64 {
    0.9
}
fn beta2() -> f64 {
    0.95
}
fn eps() -> f64 {
    1e-8
}
fn weight_decay() -> f64 {
    0.1
}
fn max_grad_norm() -> f64 {
    1.0
}

impl AdamWConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamWConfig {
            lr,
            beta1: beta1(),
            beta2: beta2(),
            eps: eps(),
            weight_decay: weight_decay(),
            max_grad_norm: max_grad_norm(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    m_a: Array2<f64>,
    v_a: Array2<f64>,
    m_b: Array2<f64>,
    v_b: Array2<f64>,
    step: u64,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig, adapter: &LowRankAdapter) -> Self {
        OptimizerState {
            config,
            m_a: Array2::zeros(adapter.a.raw_dim()),
            v_a: Array2::zeros(adapter.a.raw_dim()),
            m_b: Array2::zeros(adapter.b.raw_dim()),
            v_b: Array2::zeros(adapter.b.raw_dim()),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Clips `grad` to the configured global norm, then applies one
    /// decoupled-weight-decay Adam update. Returns the pre-clip norm.
    pub fn step(&mut self, adapter: &mut LowRankAdapter, grad: &AdapterGrad) -> Result<f64, ModelError> {
        if !grad.is_finite() {
            return Err(ModelError::NonFiniteGradient);
        }
        if grad.a.dim() != self.m_a.dim() || grad.b.dim() != self.m_b.dim() {
            return Err(ModelError::Checkpoint("gradient shape does not match optimizer state".into()));
        }
        let norm = grad.norm();
        let clip = if norm > self.config.max_grad_norm { self.config.max_grad_norm / norm } else { 1.0 };
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let update = |p: &mut Array2<f64>, m: &mut Array2<f64>, v: &mut Array2<f64>, g: &Array2<f64>| {
            Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                let g = g * clip;
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                *p -= c.lr * c.weight_decay * *p;
                *p -= c.lr * (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
            });
        };
        update(&mut adapter.a, &mut self.m_a, &mut self.v_a, &grad.a);
        update(&mut adapter.b, &mut self.m_b, &mut self.v_b, &grad.b);
        Ok(norm)
    }
}
