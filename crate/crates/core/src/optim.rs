//! First-order optimizers over a [`ParamStore`].

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(Error::Config(format!(
                "unknown optimizer {other:?} (expected adam or sgd)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..1.0).contains(&v);
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be >= 0, got {}", self.lr)));
        }
        if !unit(self.beta1) || !unit(self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config(
                "adam needs betas in [0, 1) and a positive eps".into(),
            ));
        }
        Ok(())
    }
}

/// Optimizer state: per-parameter moments and the update counter.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    steps: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        let adam = config.kind == OptimizerKind::Adam;
        Optimizer {
            m: if adam { zeros() } else { Vec::new() },
            v: if adam { zeros() } else { Vec::new() },
            config,
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn first_moment(&self, index: usize) -> &[f64] {
        &self.m[index]
    }

    pub fn second_moment(&self, index: usize) -> &[f64] {
        &self.v[index]
    }

    /// Applies one update from the accumulated gradients. Gradients are left
    /// in place; the caller zeroes them.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.steps += 1;
        let lr = self.config.lr;
        match self.config.kind {
            OptimizerKind::Sgd => {
                for id in store.ids().collect::<Vec<_>>() {
                    let p = store.param_mut(id);
                    let grad = p.grad.data().to_vec();
                    for (w, g) in p.value.data_mut().iter_mut().zip(grad) {
                        *w -= lr * g;
                    }
                }
            }
            OptimizerKind::Adam => {
                let OptimizerConfig { beta1, beta2, eps, .. } = self.config;
                let t = self.steps as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
                    let p = store.param_mut(id);
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    let grad = p.grad.data().to_vec();
                    for (j, (w, g)) in p.value.data_mut().iter_mut().zip(grad).enumerate() {
                        m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                        v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                        let m_hat = m[j] / c1;
                        let v_hat = v[j] / c2;
                        *w -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
    }
}
