use serde::{Deserialize, Serialize};

use super::check_finite;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: f64,
    #[serde(default)]
    pub momentum: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            momentum: 0.9,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0,1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}

/// Heavy-ball SGD: `v <- mu v + g; theta <- theta - lr v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub config: SgdConfig,
    pub velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(config: SgdConfig, len: usize) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            velocity: vec![0.0; len],
        })
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != grad.len() || params.len() != self.velocity.len() {
            return Err(Error::shape(
                "sgd_step",
                format!(
                    "params {}, grad {}, velocity {}",
                    params.len(),
                    grad.len(),
                    self.velocity.len()
                ),
            ));
        }
        check_finite("gradient", grad)?;
        let SgdConfig { lr, momentum } = self.config;
        for ((p, v), &g) in params.iter_mut().zip(&mut self.velocity).zip(grad) {
            *v = momentum * *v + g;
            *p -= lr * *v;
        }
        Ok(())
    }
}
