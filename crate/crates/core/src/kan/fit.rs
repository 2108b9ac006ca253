use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::network::{KanGrads, KanNetwork};
use crate::numerics::{AdamW, AdamWConfig, CosineSchedule, Matrix};
use crate::{Error, Result};

/// Full-batch regression settings for [`fit_function`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub steps: u64,
    pub optimizer: AdamWConfig,
    pub min_lr: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            steps: 10_000,
            optimizer: AdamWConfig {
                lr: 1e-2,
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
            min_lr: 1e-4,
        }
    }
}

/// Mean squared error of `net` over `(inputs[i], targets[i])` pairs.
pub fn dataset_mse(net: &KanNetwork, inputs: &Matrix, targets: &Matrix) -> Result<f64> {
    check(net, inputs, targets)?;
    let mut total = 0.0;
    for i in 0..inputs.rows() {
        let y = net.forward(inputs.row(i))?;
        total += y
            .iter()
            .zip(targets.row(i))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    Ok(total / (inputs.rows() * targets.cols()) as f64)
}

/// Trains `net` on the sample set with full-batch AdamW and a cosine
/// schedule, returning the training MSE after the last step.
pub fn fit_function(
    net: &mut KanNetwork,
    inputs: &Matrix,
    targets: &Matrix,
    cfg: &FitConfig,
) -> Result<f64> {
    check(net, inputs, targets)?;
    if cfg.steps == 0 {
        return dataset_mse(net, inputs, targets);
    }
    let schedule = CosineSchedule::with_default_warmup(cfg.optimizer.lr, cfg.steps, cfg.min_lr)?;
    let mut opt = AdamW::new(cfg.optimizer);
    let n = inputs.rows() as f64;
    let m = targets.cols() as f64;
    let mut grads = KanGrads::zeros_like(net);
    for step in 0..cfg.steps {
        for g in grads.matrices_mut() {
            g.fill(0.0);
        }
        for i in 0..inputs.rows() {
            let (y, trace) = net.forward_traced(inputs.row(i))?;
            let up: Vec<f64> = y
                .iter()
                .zip(targets.row(i))
                .map(|(a, b)| 2.0 * (a - b) / (n * m))
                .collect();
            net.backward(&trace, &up, &mut grads)?;
        }
        let lr = schedule.lr(step).max(f64::MIN_POSITIVE);
        let g: Vec<&Matrix> = grads.matrices();
        opt.step(&mut net.params_mut(), &g, lr)?;
    }
    dataset_mse(net, inputs, targets)
}

fn check(net: &KanNetwork, inputs: &Matrix, targets: &Matrix) -> Result<()> {
    if inputs.cols() != net.input_dim()
        || targets.cols() != net.output_dim()
        || inputs.rows() != targets.rows()
    {
        return Err(Error::Shape {
            op: "fit_function",
            left: inputs.shape(),
            right: targets.shape(),
        });
    }
    if inputs.rows() == 0 {
        return Err(Error::EmptyInput("fit_function needs at least one sample"));
    }
    Ok(())
}
