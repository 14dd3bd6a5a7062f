//! AdamW with decoupled weight decay.

use crate::autograd::Scalar;
use crate::error::{EivenError, Result};
use crate::nn::Named;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

pub struct AdamW<T: Scalar> {
    pub config: AdamWConfig,
    params: Vec<Named<T>>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl<T: Scalar> AdamW<T> {
    /// Tracks exactly `params`; frozen tensors are refused.
    pub fn new(params: Vec<Named<T>>, config: AdamWConfig) -> Result<Self> {
        if let Some((name, _)) = params.iter().find(|(_, t)| !t.requires_grad()) {
            return Err(EivenError::Frozen(format!(
                "optimizer given non-trainable tensor {name}"
            )));
        }
        let m = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        let v = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Ok(AdamW {
            config,
            params,
            m,
            v,
            step: 0,
        })
    }

    pub fn params(&self) -> &[Named<T>] {
        &self.params
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn zero_grad(&self) {
        for (_, t) in &self.params {
            t.zero_grad();
        }
    }

    /// Applies one update from the accumulated gradients. Tensors without
    /// a gradient are left untouched.
    pub fn step(&mut self) -> Result<()> {
        self.step += 1;
        let AdamWConfig {
            lr,
            betas: (b1, b2),
            eps,
            weight_decay,
        } = self.config;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (((_, t), m), v) in self.params.iter().zip(&mut self.m).zip(&mut self.v) {
            let Some(grad) = t.grad() else { continue };
            let mut data = t.data_mut()?;
            for i in 0..grad.len() {
                let g = grad[i].f64();
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                if lr == 0.0 {
                    continue;
                }
                let p = data[i].f64();
                let update = lr * weight_decay * p + lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                data[i] = T::of(p - update);
            }
        }
        Ok(())
    }
}
