//! First-order optimizers.

use serde::{Deserialize, Serialize};

use super::{Gradients, TinyNetParams};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerKind {
    Sgd,
    /// Adam with bias correction; weight decay is applied decoupled from the
    /// moment estimates.
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state: moment buffers for Adam, a step counter for both.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64, net: &TinyNetParams) -> Self {
        let zeros: Vec<Vec<f64>> = net
            .layers()
            .iter()
            .map(|l| vec![0.0; l.weight.len() + l.bias.len()])
            .collect();
        let (m, v) = match kind {
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
            OptimizerKind::Adam { .. } => (zeros.clone(), zeros),
        };
        Self {
            kind,
            lr,
            weight_decay,
            m,
            v,
            t: 0,
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    /// Changes the step size for subsequent updates; moment state is kept.
    pub fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update in place. Step indices for bias correction start at 1.
    pub fn step(&mut self, net: &mut TinyNetParams, grads: &Gradients) -> Result<()> {
        if grads.layers.len() != net.layers().len() {
            return Err(Error::dims("gradient and parameter layer counts differ"));
        }
        self.t += 1;
        let t = self.t as i32;
        let (lr, wd) = (self.lr, self.weight_decay);
        for (li, (p, g)) in net.layers_mut().iter_mut().zip(&grads.layers).enumerate() {
            if p.weight.len() != g.weight.len() || p.bias.len() != g.bias.len() {
                return Err(Error::dims(format!("layer {li} gradient shape")));
            }
            let params = p.weight.iter_mut().chain(p.bias.iter_mut());
            let grad = g.weight.iter().chain(&g.bias);
            match self.kind {
                OptimizerKind::Sgd => {
                    for (theta, &gi) in params.zip(grad) {
                        *theta -= lr * (gi + wd * *theta);
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    let (m, v) = (&mut self.m[li], &mut self.v[li]);
                    for (k, (theta, &gi)) in params.zip(grad).enumerate() {
                        m[k] = beta1 * m[k] + (1.0 - beta1) * gi;
                        v[k] = beta2 * v[k] + (1.0 - beta2) * gi * gi;
                        let m_hat = m[k] / c1;
                        let v_hat = v[k] / c2;
                        *theta -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * *theta);
                    }
                }
            }
        }
        if !net.is_finite() {
            return Err(Error::NonFinite(format!(
                "parameters after step {}",
                self.t
            )));
        }
        Ok(())
    }
}
