//! Deterministic optimizers over flat `f64` parameter vectors.
//!
//! Identical inputs give bit-identical updates, which is what keeps
//! data-parallel replicas in lockstep without exchanging optimizer state.

mod lbfgs;
mod sgd;

pub use lbfgs::{Lbfgs, LbfgsConfig, StepReport};
pub use sgd::{Sgd, SgdConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Optimizer selection as it appears in a run config.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd(SgdConfig),
    Lbfgs(LbfgsConfig),
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Sgd(SgdConfig::default())
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            OptimizerConfig::Sgd(c) => c.validate(),
            OptimizerConfig::Lbfgs(c) => c.validate(),
        }
    }
}

pub(crate) fn check_finite(what: &str, v: &[f64]) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(Error::NonFinite(format!("{what}[{i}] = {}", v[i]))),
        None => Ok(()),
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Live optimizer of either kind.
#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer {
    Sgd(Sgd),
    Lbfgs(Lbfgs),
}

const STATE_SGD: u64 = 1;
const STATE_LBFGS: u64 = 2;

impl Optimizer {
    pub fn new(config: &OptimizerConfig, len: usize) -> Result<Self> {
        Ok(match config {
            OptimizerConfig::Sgd(c) => Optimizer::Sgd(Sgd::new(*c, len)?),
            OptimizerConfig::Lbfgs(c) => Optimizer::Lbfgs(Lbfgs::new(*c)?),
        })
    }

    /// Internal state (velocity or curvature pairs) as raw words.
    pub fn state_words(&self) -> Vec<u64> {
        match self {
            Optimizer::Sgd(s) => {
                let mut out = vec![STATE_SGD, s.velocity.len() as u64];
                out.extend(s.velocity.iter().map(|v| v.to_bits()));
                out
            }
            Optimizer::Lbfgs(l) => {
                let pairs: Vec<_> = l.pairs().collect();
                let len = pairs.first().map_or(0, |(s, _)| s.len());
                let mut out = vec![STATE_LBFGS, pairs.len() as u64, len as u64];
                for (s, y) in pairs {
                    out.extend(s.iter().chain(y).map(|v| v.to_bits()));
                }
                out
            }
        }
    }

    /// Restores state written by [`Optimizer::state_words`] into an optimizer
    /// built from the same config.
    pub fn restore(&mut self, words: &[u64]) -> Result<()> {
        let bad = |why: &str| Error::Format(format!("optimizer state: {why}"));
        match (self, words) {
            (Optimizer::Sgd(s), [STATE_SGD, n, rest @ ..]) => {
                if *n as usize != s.velocity.len() || rest.len() != s.velocity.len() {
                    return Err(bad("velocity length does not match the model"));
                }
                s.velocity = rest.iter().map(|&w| f64::from_bits(w)).collect();
                Ok(())
            }
            (Optimizer::Lbfgs(l), [STATE_LBFGS, k, len, rest @ ..]) => {
                let (k, len) = (*k as usize, *len as usize);
                if rest.len() != 2 * k * len {
                    return Err(bad("truncated curvature pairs"));
                }
                l.reset();
                for pair in rest.chunks_exact(2 * len.max(1)).take(k) {
                    let (s, y) = pair.split_at(len);
                    l.push_pair(
                        s.iter().map(|&w| f64::from_bits(w)).collect(),
                        y.iter().map(|&w| f64::from_bits(w)).collect(),
                    )?;
                }
                Ok(())
            }
            _ => Err(bad("kind does not match the configured optimizer")),
        }
    }
}
