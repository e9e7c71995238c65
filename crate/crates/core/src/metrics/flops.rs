//! Training and inference FLOPs.
//!
//! A backward pass is costed at twice its forward pass, so one
//! forward+backward costs `3F`. An adversarial iteration with `s` attack
//! steps runs `s` forward+backward passes to the input plus the training
//! pass: `3F(s + 1)`.

use crate::error::{Error, Result};
use crate::models::{weight_layers, ModelSpec};

/// Per-sample forward FLOPs split into a fixed part and per-prunable-layer
/// parts that scale with layer density.
#[derive(Debug, Clone, PartialEq)]
pub struct FlopModel {
    /// FLOPs of non-prunable weight layers.
    pub fixed: f64,
    /// Dense FLOPs of each prunable layer, in mask order.
    pub prunable: Vec<f64>,
}

impl FlopModel {
    pub fn new(spec: &ModelSpec) -> Result<Self> {
        let mut fixed = 0.0;
        let mut prunable = Vec::new();
        for w in weight_layers(spec)? {
            if w.prunable {
                prunable.push(w.flops as f64);
            } else {
                fixed += w.flops as f64;
            }
        }
        Ok(Self { fixed, prunable })
    }

    pub fn dense_forward(&self) -> f64 {
        self.fixed + self.prunable.iter().sum::<f64>()
    }

    /// Per-sample forward FLOPs at the given prunable-layer densities.
    pub fn forward(&self, densities: &[f64]) -> Result<f64> {
        if densities.len() != self.prunable.len() {
            return Err(Error::LengthMismatch(self.prunable.len(), densities.len()));
        }
        Ok(self.fixed + self.prunable.iter().zip(densities).map(|(f, d)| f * d).sum::<f64>())
    }

    /// Cost of one training iteration on `batch` samples.
    pub fn iteration(&self, densities: &[f64], batch: usize, attack_steps: usize) -> Result<f64> {
        Ok(iteration_flops(self.forward(densities)? * batch as f64, attack_steps))
    }
}

/// `3F(steps + 1)` for per-batch forward FLOPs `F`; `steps = 0` is a
/// standard iteration.
pub fn iteration_flops(batch_forward: f64, attack_steps: usize) -> f64 {
    3.0 * batch_forward * (attack_steps as f64 + 1.0)
}

/// Sum of per-iteration costs.
pub fn training_flops_total(per_iteration: &[f64]) -> f64 {
    per_iteration.iter().sum()
}
