//! AdamW and the learning-rate / temperature schedules.

use crate::autograd::ParamStore;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Adam with decoupled weight decay. Moments are kept in parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub cfg: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(store: &ParamStore<T>, cfg: AdamConfig) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        AdamW {
            cfg,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// `theta <- theta (1 - lr wd) - lr m_hat / (sqrt(v_hat) + eps)`.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::contract("adamw_step", format!("learning rate must be positive, got {lr}")));
        }
        if self.m.len() != store.len() {
            return Err(Error::contract("adamw_step", "optimizer state does not match parameters"));
        }
        self.step += 1;
        let c = self.cfg;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let decay = T::lit(1.0 - lr * c.weight_decay);
        let (lr_t, eps) = (T::lit(lr / bc1), T::lit(c.eps));
        let inv_bc2 = T::lit(1.0 / bc2);
        let one = T::one();
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = p.grad.data();
            for (((x, &gi), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                *x = *x * decay - lr_t * *mi / ((*vi * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Cosine annealing from `start` at epoch 0 to `end` at the last epoch.
pub fn cosine_lr(epoch: usize, total: usize, start: f64, end: f64) -> f64 {
    if total <= 1 {
        return start;
    }
    let f = epoch.min(total - 1) as f64 / (total - 1) as f64;
    end + 0.5 * (start - end) * (1.0 + (std::f64::consts::PI * f).cos())
}

/// Geometric interpolation from `start` at epoch 0 to `end` at the last epoch.
pub fn tau_schedule(epoch: usize, total: usize, start: f64, end: f64) -> f64 {
    if total <= 1 {
        return start;
    }
    let f = epoch.min(total - 1) as f64 / (total - 1) as f64;
    start * (end / start).powf(f)
}
