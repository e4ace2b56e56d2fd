//! First-order optimizers over a flat list of parameter tensors.

use std::fmt;
use std::str::FromStr;

use cpgnn_autodiff::{Real, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sgd => "sgd",
            Self::Adam => "adam",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            other => Err(format!("unknown optimizer {other:?}, expected sgd or adam")),
        }
    }
}

/// Optimizer with its full mutable state, so that a checkpoint can restore it
/// exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: Real,
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
    /// Number of steps taken.
    pub t: u64,
    /// First and second moment buffers (Adam only; empty for SGD).
    pub m: Vec<Vec<Real>>,
    pub v: Vec<Vec<Real>>,
}

impl Optimizer {
    pub fn sgd(lr: Real) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr,
            beta1: 0.0,
            beta2: 0.0,
            eps: 0.0,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Adam with β1 = 0.9, β2 = 0.999, ε = 1e-8.
    pub fn adam(lr: Real, params: &[Tensor]) -> Self {
        let zeros: Vec<Vec<Real>> = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        Self {
            kind: OptimizerKind::Adam,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn new(kind: OptimizerKind, lr: Real, params: &[Tensor]) -> Self {
        match kind {
            OptimizerKind::Sgd => Self::sgd(lr),
            OptimizerKind::Adam => Self::adam(lr, params),
        }
    }

    /// Applies one update. `grads[i]` must have the shape of `params[i]`.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        self.t += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (x, &gx) in p.data_mut().iter_mut().zip(g.data()) {
                        *x -= self.lr * gx;
                    }
                }
            }
            OptimizerKind::Adam => {
                let t = self.t as i32;
                let c1 = 1.0 - self.beta1.powi(t);
                let c2 = 1.0 - self.beta2.powi(t);
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for (j, (x, &gx)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gx;
                        v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gx * gx;
                        let mh = m[j] / c1;
                        let vh = v[j] / c2;
                        *x -= self.lr * mh / (vh.sqrt() + self.eps);
                    }
                }
            }
        }
    }
}
