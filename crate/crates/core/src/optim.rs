//! First-order optimizers over a [`ParamStore`].

use serde::{Deserialize, Serialize};

use crate::error::{CrnError, Result};
use crate::params::{GradStore, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "default_kind")]
    pub kind: OptimizerKind,
    #[serde(default = "default_step_size")]
    pub step_size: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_kind() -> OptimizerKind {
    OptimizerKind::Adam
}
fn default_step_size() -> f64 {
    1e-4
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: default_kind(),
            step_size: default_step_size(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.step_size.is_finite()
            && self.step_size >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if !ok {
            return Err(CrnError::Argument(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// Adam or plain gradient descent. Parameters are rounded back to f32 after
/// every update so checkpoints reproduce the in-memory model exactly.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, params: &ParamStore) -> Result<Self> {
        config.validate()?;
        let zeros: Vec<Vec<f64>> = params.entries().iter().map(|e| vec![0.0; e.data.len()]).collect();
        Ok(Optimizer {
            config,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &GradStore) -> Result<()> {
        if grads.buffers().len() != self.m.len() {
            return Err(CrnError::Dimension("gradient store does not match parameters".into()));
        }
        self.t += 1;
        let lr = self.config.step_size;
        let (b1, b2, eps) = (self.config.beta1, self.config.beta2, self.config.eps);
        let c1 = 1.0 - b1.powi(self.t.min(i32::MAX as u64) as i32);
        let c2 = 1.0 - b2.powi(self.t.min(i32::MAX as u64) as i32);
        for (i, entry) in params.entries_mut().iter_mut().enumerate() {
            let g = &grads.buffers()[i];
            match self.config.kind {
                OptimizerKind::Sgd => {
                    for (p, g) in entry.data.iter_mut().zip(g) {
                        *p -= lr * g;
                    }
                }
                OptimizerKind::Adam => {
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for j in 0..g.len() {
                        m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                        v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                        let mh = m[j] / c1;
                        let vh = v[j] / c2;
                        entry.data[j] -= lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
        params.quantize();
        Ok(())
    }
}
