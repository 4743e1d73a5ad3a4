//! Adaptive-moment parameter updates.

use crate::error::{CoatError, Result};
use crate::model::scalar::Scalar;
use crate::model::transformer::TinyLm;

/// Adam state: first/second moment accumulators matching the flat
/// parameter buffer, plus the step count and hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<S: Scalar> {
    pub step: u64,
    pub m: Vec<S>,
    pub v: Vec<S>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new(n_params: usize, lr: f64) -> Self {
        OptimizerState {
            step: 0,
            m: vec![S::zero(); n_params],
            v: vec![S::zero(); n_params],
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl<S: Scalar> TinyLm<S> {
    /// One optimizer step on a batch of `(token ids, target mask)` pairs.
    /// Returns the batch loss (global masked token mean). Aborts with a
    /// diagnostic if the loss or any updated parameter is non-finite.
    pub fn backward_and_step(
        &mut self,
        opt: &mut OptimizerState<S>,
        batch: &[(Vec<u32>, Vec<bool>)],
    ) -> Result<f64> {
        if opt.m.len() != self.params.len() || opt.v.len() != self.params.len() {
            return Err(CoatError::InvalidArgument(format!(
                "optimizer state for {} parameters applied to a model with {}",
                opt.m.len(),
                self.params.len()
            )));
        }
        // Dropout masks are keyed off the step count, so a rerun of the
        // same schedule reproduces the same masks.
        let (loss, grad) = self.batch_grad(batch, opt.step)?;
        if !loss.is_finite() {
            return Err(CoatError::NonFinite(format!(
                "loss {loss} at optimizer step {} (batch of {})",
                opt.step,
                batch.len()
            )));
        }
        opt.step += 1;
        let t = opt.step as i32;
        let b1 = S::from_f64(opt.beta1);
        let b2 = S::from_f64(opt.beta2);
        let one = S::one();
        let corr1 = S::from_f64(1.0 - opt.beta1.powi(t));
        let corr2 = S::from_f64(1.0 - opt.beta2.powi(t));
        let lr = S::from_f64(opt.lr);
        let eps = S::from_f64(opt.epsilon);
        for i in 0..self.params.len() {
            let g = grad[i];
            opt.m[i] = b1 * opt.m[i] + (one - b1) * g;
            opt.v[i] = b2 * opt.v[i] + (one - b2) * g * g;
            let m_hat = opt.m[i] / corr1;
            let v_hat = opt.v[i] / corr2;
            self.params[i] = self.params[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
        for (i, p) in self.params.iter().enumerate() {
            if !p.is_finite() {
                let name = self
                    .layout
                    .entries
                    .iter()
                    .find(|e| i >= e.offset && i < e.offset + e.len)
                    .map(|e| e.name.as_str())
                    .unwrap_or("?");
                return Err(CoatError::NonFinite(format!(
                    "parameter {name}[{i}] became non-finite at step {}",
                    opt.step
                )));
            }
        }
        Ok(loss)
    }
}
