//! Update rules for flat parameter vectors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    /// Plain gradient descent with a fixed step.
    #[default]
    Sgd,
    /// Adam with the usual moment decay rates (0.9, 0.999) and ε = 1e-8.
    Adam,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Per-run optimizer state. `direction` maps a gradient to the vector that
/// gets subtracted from the parameters after scaling by the learning rate.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    kind: Optimizer,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl OptimizerState {
    pub fn new(kind: Optimizer, params: usize) -> Self {
        let moments = match kind {
            Optimizer::Sgd => 0,
            Optimizer::Adam => params,
        };
        OptimizerState {
            kind,
            m: vec![0.0; moments],
            v: vec![0.0; moments],
            t: 0,
        }
    }

    pub fn direction(&mut self, grad: &[f64]) -> Result<Vec<f64>> {
        match self.kind {
            Optimizer::Sgd => Ok(grad.to_vec()),
            Optimizer::Adam => {
                if grad.len() != self.m.len() {
                    return Err(Error::dimension("optimizer gradient", self.m.len(), grad.len()));
                }
                self.t += 1;
                let c1 = 1.0 - BETA1.powi(self.t);
                let c2 = 1.0 - BETA2.powi(self.t);
                Ok(grad
                    .iter()
                    .zip(self.m.iter_mut().zip(self.v.iter_mut()))
                    .map(|(&g, (m, v))| {
                        *m = BETA1 * *m + (1.0 - BETA1) * g;
                        *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                        (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS)
                    })
                    .collect())
            }
        }
    }
}
