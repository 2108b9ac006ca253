//! Dense linear algebra, seeded randomness, optimizers and the
//! finite-difference gradient oracle used to validate every trainable module.
//!
//! All arithmetic is `f64`. Narrowing to `f32` happens only when a frame is
//! written to the wire.

mod gradcheck;
mod matrix;
mod optim;
mod rng;

pub use gradcheck::grad_check;
pub use matrix::{dot, matmul, Matrix};
pub use optim::{cosine_lr, AdamW, AdamWConfig, AdamWState, CosineSchedule};
pub use rng::{derive_seed, Rng};

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// In-place softmax; the max is subtracted first.
pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = libm::exp(*x - max);
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
