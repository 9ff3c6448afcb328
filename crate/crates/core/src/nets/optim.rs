//! First-order parameter updates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Sgd,
    #[default]
    Adam,
}

/// Optimizer state carried across updates.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub algorithm: Algorithm,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl OptimizerState {
    pub fn new(algorithm: Algorithm, learning_rate: f64) -> Result<Self> {
        if !(learning_rate > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        Ok(Self {
            algorithm,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn sgd(learning_rate: f64) -> Result<Self> {
        Self::new(Algorithm::Sgd, learning_rate)
    }

    pub fn adam(learning_rate: f64) -> Result<Self> {
        Self::new(Algorithm::Adam, learning_rate)
    }

    /// Applies one update in place.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape(&[params.len()], &[grads.len()]));
        }
        self.step += 1;
        let lr = self.learning_rate;
        match self.algorithm {
            Algorithm::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= lr * g;
                }
            }
            Algorithm::Adam => {
                if self.m.len() != params.len() {
                    self.m = vec![0.0; params.len()];
                    self.v = vec![0.0; params.len()];
                }
                let (b1, b2) = (self.beta1, self.beta2);
                let c1 = 1.0 - b1.powi(self.step as i32);
                let c2 = 1.0 - b2.powi(self.step as i32);
                for i in 0..params.len() {
                    let g = grads[i];
                    self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
                    self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
                    let mh = self.m[i] / c1;
                    let vh = self.v[i] / c2;
                    params[i] -= lr * mh / (vh.sqrt() + self.eps);
                }
            }
        }
        Ok(())
    }
}

/// Functional form: returns the updated parameters.
pub fn optimizer_step(state: &mut OptimizerState, params: &[f64], grads: &[f64]) -> Result<Vec<f64>> {
    let mut out = params.to_vec();
    state.update(&mut out, grads)?;
    Ok(out)
}
