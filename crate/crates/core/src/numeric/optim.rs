use std::collections::BTreeMap;
use std::f64::consts::PI;

use super::Tensor;
use crate::error::{Error, Result};

/// Adam with bias correction and a cosine-annealed learning rate.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Length of the cosine schedule; the rate reaches 0 at this step.
    pub total_steps: usize,
    step: usize,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, total_steps: usize) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            total_steps: total_steps.max(1),
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Learning rate used for update number `k` (0-based).
    pub fn lr_at(&self, k: usize) -> f64 {
        let progress = (k.min(self.total_steps)) as f64 / self.total_steps as f64;
        0.5 * self.lr * (1.0 + (PI * progress).cos())
    }

    /// One update over every `(name, parameter, gradient)` triple.
    pub fn step<'a, I>(&mut self, updates: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a mut Tensor, &'a Tensor)>,
    {
        let lr = self.lr_at(self.step);
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, param, grad) in updates {
            if param.shape() != grad.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("{name}: param {:?} vs grad {:?}", param.shape(), grad.shape()),
                ));
            }
            let n = param.len();
            let m = self.first.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            let v = self.second.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            if m.len() != n {
                return Err(Error::shape(
                    "adam_step",
                    format!("{name}: moment buffer {} vs param {n}", m.len()),
                ));
            }
            for (((p, g), mi), vi) in param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let update = lr * (*mi / bc1) / ((*vi / bc2).sqrt() + self.eps);
                *p -= update;
            }
        }
        Ok(())
    }
}
