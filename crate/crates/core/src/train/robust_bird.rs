//! Early ticket drawing from mask-distance convergence, with rewinding to
//! the original initialization.

use std::collections::VecDeque;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::FlopModel;
use crate::model::Model;
use crate::real::Real;
use crate::sparsity::{global_magnitude_mask, mask_distance, SparsityMask};
use crate::train::epoch::{iterations_per_epoch, train_epoch, EpochConfig};
use crate::train::optim::OptimizerState;

#[derive(Debug, Clone, PartialEq)]
pub struct RbConfig {
    pub sparsity: f64,
    /// Draw once every distance in the window is below this.
    pub tau: f64,
    pub queue_len: usize,
    pub max_epochs: usize,
}

impl Default for RbConfig {
    fn default() -> Self {
        Self {
            sparsity: 0.8,
            tau: 0.1,
            queue_len: 5,
            max_epochs: 30,
        }
    }
}

impl RbConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::InvalidArgument(format!("rb tau {} outside (0, 1]", self.tau)));
        }
        if self.queue_len < 2 {
            return Err(Error::InvalidArgument("rb queue length must be >= 2".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::InvalidArgument("rb max epochs must be >= 1".into()));
        }
        Ok(())
    }
}

/// Sliding window over the most recent mask distances.
#[derive(Debug, Clone, PartialEq)]
pub struct DrawDetector {
    queue: VecDeque<f64>,
    len: usize,
    tau: f64,
}

impl DrawDetector {
    pub fn new(len: usize, tau: f64) -> Self {
        Self {
            queue: VecDeque::with_capacity(len),
            len,
            tau,
        }
    }

    /// Records a distance; true when the window is full and its maximum is
    /// below the threshold.
    pub fn push(&mut self, distance: f64) -> bool {
        if self.queue.len() == self.len {
            self.queue.pop_front();
        }
        self.queue.push_back(distance);
        self.queue.len() == self.len && self.queue.iter().all(|&d| d < self.tau)
    }
}

/// 1-based epoch at which a ticket is drawn from a distance sequence
/// (`distances[t-1]` compares the masks after epochs `t-1` and `t`).
pub fn draw_epoch(distances: &[f64], queue_len: usize, tau: f64) -> Option<usize> {
    let mut det = DrawDetector::new(queue_len, tau);
    distances.iter().position(|&d| det.push(d)).map(|i| i + 1)
}

/// `theta0` with `mask` installed: active weights keep their original
/// values, the rest are zero.
pub fn rewind<T: Real>(theta0: &Model<T>, mask: &SparsityMask) -> Result<Model<T>> {
    let mut m = theta0.clone();
    m.set_masks(mask)?;
    Ok(m)
}

#[derive(Debug, Clone)]
pub struct RbOutcome<T> {
    pub mask: SparsityMask,
    /// `theta0` restricted to `mask`.
    pub model: Model<T>,
    /// Epoch the ticket was drawn at; `None` when `max_epochs` ran out.
    pub draw_epoch: Option<usize>,
    pub distances: Vec<f64>,
    pub flops: f64,
}

impl<T> RbOutcome<T> {
    pub fn converged(&self) -> bool {
        self.draw_epoch.is_some()
    }
}

/// Trains a dense copy of `theta0` epoch by epoch under `cfg.regime`,
/// tracking the global magnitude mask at the target sparsity, until the
/// mask stabilizes. Returns that mask applied to `theta0`.
pub fn find_robust_bird<T: Real>(theta0: &Model<T>, data: &Dataset, rb: &RbConfig, cfg: &EpochConfig) -> Result<RbOutcome<T>> {
    rb.validate()?;
    let flop_model = FlopModel::new(&theta0.spec)?;
    let names = theta0.masks().names;
    let mut model = theta0.clone();
    model.clear_masks();
    let mut opt = OptimizerState::new(&model);
    let cfg = EpochConfig {
        total_iterations: iterations_per_epoch(data.len(), cfg.batch_size) * rb.max_epochs as u64,
        ..cfg.clone()
    };
    let mut prev = global_magnitude_mask(names.clone(), &model.prunable_values(), rb.sparsity)?;
    let mut det = DrawDetector::new(rb.queue_len, rb.tau);
    let mut distances = Vec::new();
    let mut flops = 0.0;
    let mut iteration = 0;
    for epoch in 0..rb.max_epochs {
        flops += train_epoch(&mut model, &mut opt, data, &cfg, &flop_model, epoch, &mut iteration, &mut |_, _, _| Ok(0.0))?.flops;
        let mask = global_magnitude_mask(names.clone(), &model.prunable_values(), rb.sparsity)?;
        let d = mask_distance(&mask, &prev)?;
        distances.push(d);
        prev = mask;
        if det.push(d) {
            return Ok(RbOutcome {
                model: rewind(theta0, &prev)?,
                mask: prev,
                draw_epoch: Some(epoch + 1),
                distances,
                flops,
            });
        }
    }
    Ok(RbOutcome {
        model: rewind(theta0, &prev)?,
        mask: prev,
        draw_epoch: None,
        distances,
        flops,
    })
}
