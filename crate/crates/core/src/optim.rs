//! Plain gradient descent and AdamW over named parameter sets.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    /// `p <- p - lr * g`
    Sgd,
    /// Adam with decoupled weight decay.
    #[serde(rename = "adamw")]
    AdamW {
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    },
}

impl OptimizerKind {
    pub fn adamw_default() -> Self {
        OptimizerKind::AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSettings {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub batch_size: usize,
}

impl OptimizerSettings {
    pub fn sgd(lr: f64, batch_size: usize) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr,
            batch_size,
        }
    }

    pub fn adamw(lr: f64, batch_size: usize) -> Self {
        Self {
            kind: OptimizerKind::adamw_default(),
            lr,
            batch_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(Error::invalid(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    settings: OptimizerSettings,
    moments: IndexMap<String, (Tensor, Tensor)>,
    steps: u64,
}

impl Optimizer {
    pub fn new(settings: OptimizerSettings) -> Result<Self> {
        settings.validate()?;
        Ok(Self {
            settings,
            moments: IndexMap::new(),
            steps: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Update every entry of `params` that has a gradient; others are left untouched.
    pub fn step(&mut self, params: &mut ParamSet, grads: &IndexMap<String, Tensor>) -> Result<()> {
        self.steps += 1;
        let lr = self.settings.lr;
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::invalid(format!("gradient for unknown parameter '{name}'")))?;
            if p.shape() != g.shape() {
                return Err(Error::shape(
                    "optimizer",
                    format!("'{name}' is {:?}, gradient is {:?}", p.shape(), g.shape()),
                ));
            }
            match self.settings.kind {
                OptimizerKind::Sgd => p.axpy(-lr, g)?,
                OptimizerKind::AdamW {
                    beta1,
                    beta2,
                    eps,
                    weight_decay,
                } => {
                    let (m, v) = self
                        .moments
                        .entry(name.clone())
                        .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
                    let bc1 = 1.0 - beta1.powi(self.steps as i32);
                    let bc2 = 1.0 - beta2.powi(self.steps as i32);
                    let decay = 1.0 - lr * weight_decay;
                    for (((pv, mv), vv), &gv) in p
                        .data_mut()
                        .iter_mut()
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                        .zip(g.data())
                    {
                        *mv = beta1 * *mv + (1.0 - beta1) * gv;
                        *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                        let m_hat = *mv / bc1;
                        let v_hat = *vv / bc2;
                        *pv = *pv * decay - lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
