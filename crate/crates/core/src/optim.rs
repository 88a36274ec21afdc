//! Adam with bias correction.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{LensError, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment accumulators, one pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState<T: Real = f32> {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig, params: &[Tensor<T>]) -> Self {
        Self {
            config,
            step: 0,
            first: params.iter().map(|p| alloc::vec![T::zero(); p.len()]).collect(),
            second: params.iter().map(|p| alloc::vec![T::zero(); p.len()]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update. `grads[i] == None` leaves parameter `i` (and its moments)
    /// untouched, which is how frozen parameters are expressed.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Option<Tensor<T>>], lr: f64) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(LensError::Shape(format!(
                "adam state for {} tensors, got {} params and {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        if !(lr > 0.0) {
            return Err(LensError::Contract(format!("learning rate {lr} must be positive")));
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.len() != params[i].len() {
                    return Err(LensError::Shape(format!("gradient {i} has the wrong size")));
                }
                if !g.is_finite() {
                    return Err(LensError::Numeric(format!("non-finite gradient for parameter {i}")));
                }
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - powu(beta1, self.step);
        let c2 = 1.0 - powu(beta2, self.step);
        let (b1, b2) = (T::of(beta1), T::of(beta2));
        let (lr_t, c1, c2, eps) = (T::of(lr), T::of(c1), T::of(c2), T::of(eps));
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (((p, &gi), mi), vi) in params[i].data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *p = *p - lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

fn powu(x: f64, n: u64) -> f64 {
    let mut acc = 1.0;
    for _ in 0..n.min(1 << 20) {
        acc *= x;
        if acc == 0.0 {
            break;
        }
    }
    acc
}
