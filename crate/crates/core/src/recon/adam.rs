use alloc::vec::Vec;

use super::{Gradients, ReconModule};
use crate::error::{Error, Result};
use crate::math;

/// Bias-corrected Adam moments for one flat parameter buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step_count: u64,
}

impl AdamState {
    /// Default hyper-parameters (`beta1 = 0.9`, `beta2 = 0.999`, `eps = 1e-8`).
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            first_moment: alloc::vec![0.0; len],
            second_moment: alloc::vec![0.0; len],
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.second_moment
    }

    /// Applies one update to `params` in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        let len = self.first_moment.len();
        if params.len() != len || grads.len() != len {
            return Err(Error::ShapeMismatch {
                expected: len,
                actual: if params.len() != len { params.len() } else { grads.len() },
            });
        }
        self.step_count += 1;
        let c1 = 1.0 - math::powi(self.beta1, self.step_count);
        let c2 = 1.0 - math::powi(self.beta2, self.step_count);
        let (b1, b2) = (self.beta1, self.beta2);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= self.lr * m_hat / (math::sqrt(v_hat) + self.eps);
        }
        Ok(())
    }
}

pub fn adam_step(module: &mut ReconModule, grads: &Gradients, state: &mut AdamState) -> Result<()> {
    state.step(module.params_mut(), grads.as_slice())
}
