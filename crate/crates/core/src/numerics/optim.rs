use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::{error::config, Error, Result};

/// AdamW hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moments and step counter for one parameter matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Matrix,
    v: Matrix,
    step: u64,
}

impl AdamWState {
    pub fn new(shape: (usize, usize), cfg: &AdamWConfig) -> Self {
        Self {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            m: Matrix::zeros(shape.0, shape.1),
            v: Matrix::zeros(shape.0, shape.1),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &Matrix {
        &self.m
    }

    pub fn second_moment(&self) -> &Matrix {
        &self.v
    }

    /// One decoupled-weight-decay Adam update:
    ///
    /// ```text
    /// m ← β1·m + (1-β1)·g        v ← β2·v + (1-β2)·g²
    /// p ← p·(1 - lr·wd) - lr · m̂ / (√v̂ + ε)
    /// ```
    /// with bias-corrected `m̂ = m/(1-β1ᵗ)`, `v̂ = v/(1-β2ᵗ)`.
    pub fn step(&mut self, params: &mut Matrix, grads: &Matrix) -> Result<()> {
        if params.shape() != grads.shape() || params.shape() != self.m.shape() {
            return Err(Error::Shape {
                op: "adamw_step",
                left: params.shape(),
                right: grads.shape(),
            });
        }
        if !(self.lr > 0.0) {
            return Err(config("AdamW learning rate must be positive"));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - libm::pow(self.beta1, t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, t as f64);
        let decay = 1.0 - self.lr * self.weight_decay;
        let (b1, b2) = (self.beta1, self.beta2);
        let p = params.as_mut_slice();
        let m = self.m.as_mut_slice();
        let v = self.v.as_mut_slice();
        for (((p, &g), m), v) in p.iter_mut().zip(grads.as_slice()).zip(m).zip(v) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p = *p * decay - self.lr * m_hat / (libm::sqrt(v_hat) + self.eps);
        }
        Ok(())
    }
}

/// AdamW over an ordered list of parameter matrices.
///
/// States are created on the first call, one per parameter; later calls must
/// pass the parameters in the same order.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    states: Vec<AdamWState>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            states: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[&Matrix], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(config("parameter and gradient lists differ in length"));
        }
        if self.states.is_empty() {
            self.states = params
                .iter()
                .map(|p| AdamWState::new(p.shape(), &self.config))
                .collect();
        } else if self.states.len() != params.len() {
            return Err(config("parameter list changed between optimizer steps"));
        }
        for ((state, p), g) in self.states.iter_mut().zip(params.iter_mut()).zip(grads) {
            state.lr = lr;
            state.step(p, g)?;
        }
        Ok(())
    }
}

/// Linear warmup from zero followed by cosine decay to `min_lr`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub min_lr: f64,
}

impl CosineSchedule {
    pub fn new(base_lr: f64, warmup_steps: u64, total_steps: u64, min_lr: f64) -> Result<Self> {
        if warmup_steps > total_steps {
            return Err(config("warmup longer than the schedule"));
        }
        if !(min_lr <= base_lr) || min_lr < 0.0 {
            return Err(config("need 0 <= min_lr <= base_lr"));
        }
        Ok(Self {
            base_lr,
            warmup_steps,
            total_steps,
            min_lr,
        })
    }

    /// Warmup of 5% of `total_steps` (rounded down).
    pub fn with_default_warmup(base_lr: f64, total_steps: u64, min_lr: f64) -> Result<Self> {
        Self::new(base_lr, total_steps / 20, total_steps, min_lr)
    }

    /// Learning rate at `step`. Steps past `total_steps` clamp to `min_lr`.
    pub fn lr(&self, step: u64) -> f64 {
        if step >= self.total_steps {
            return self.min_lr;
        }
        if step < self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        let span = (self.total_steps - self.warmup_steps) as f64;
        let progress = (step - self.warmup_steps) as f64 / span;
        self.min_lr
            + (self.base_lr - self.min_lr) * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * progress))
    }
}

pub fn cosine_lr(sched: &CosineSchedule, step: u64) -> f64 {
    sched.lr(step)
}
