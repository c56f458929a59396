use std::collections::BTreeMap;

use crate::config::Config;
use crate::model::graph::Gradients;
use crate::model::{Matrix, RankerModel};

/// Adam with bias correction. Moments are keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: u64,
    first: BTreeMap<String, Matrix>,
    second: BTreeMap<String, Matrix>,
}

impl Adam {
    pub fn new(learning_rate: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            learning_rate,
            beta1,
            beta2,
            eps,
            steps: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn from_config(config: &Config) -> Self {
        Self::new(
            config.learning_rate,
            config.adam_beta1,
            config.adam_beta2,
            config.adam_eps,
        )
    }

    pub fn first_moment(&self, name: &str) -> Option<&Matrix> {
        self.first.get(name)
    }

    pub fn second_moment(&self, name: &str) -> Option<&Matrix> {
        self.second.get(name)
    }

    /// Applies one update. Parameters without a gradient are left alone.
    pub fn step(&mut self, model: &mut RankerModel, grads: &Gradients) {
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (lr, b1, b2, eps) = (self.learning_rate, self.beta1, self.beta2, self.eps);
        let (first, second) = (&mut self.first, &mut self.second);
        model.visit_mut(&mut |name, param| {
            let Some(g) = grads.get(&name) else { return };
            let (rows, cols) = param.shape();
            let m = first
                .entry(name.clone())
                .or_insert_with(|| Matrix::zeros(rows, cols));
            let v = second
                .entry(name)
                .or_insert_with(|| Matrix::zeros(rows, cols));
            for (((p, g), m), v) in param
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        });
        model.step += 1;
    }
}
