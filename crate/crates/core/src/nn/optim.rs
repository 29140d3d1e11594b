use serde::{Deserialize, Serialize};

use super::{Gradients, MlpModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

pub trait Optimizer {
    fn step(&mut self, model: &mut MlpModel, grads: &Gradients);
}

/// Plain gradient descent.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub learning_rate: f64,
}

impl Optimizer for Sgd {
    fn step(&mut self, model: &mut MlpModel, grads: &Gradients) {
        for (params, g) in model.param_slices_mut().into_iter().zip(&grads.slices) {
            for (p, g) in params.iter_mut().zip(g) {
                *p -= self.learning_rate * g;
            }
        }
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: i32,
}

impl Adam {
    pub fn new(learning_rate: f64, beta1: f64, beta2: f64) -> Self {
        Self { learning_rate, beta1, beta2, epsilon: 1e-8, first: Vec::new(), second: Vec::new(), steps: 0 }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, model: &mut MlpModel, grads: &Gradients) {
        if self.first.is_empty() {
            self.first = grads.slices.iter().map(|s| vec![0.0; s.len()]).collect();
            self.second = self.first.clone();
        }
        self.steps += 1;
        let c1 = 1.0 - self.beta1.powi(self.steps);
        let c2 = 1.0 - self.beta2.powi(self.steps);
        for (k, params) in model.param_slices_mut().into_iter().enumerate() {
            let g = &grads.slices[k];
            let m = &mut self.first[k];
            let v = &mut self.second[k];
            for i in 0..params.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                params[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}
