//! One pass over the training set under a chosen regime.

use rand::seq::SliceRandom;

use crate::attacks::{perturb, pgd_attack, AttackConfig};
use crate::autodiff::BackwardOptions;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{argmax, FlopModel};
use crate::model::{Mode, Model};
use crate::real::Real;
use crate::rng::{stream, Purpose};
use crate::tensor::Tensor;
use crate::train::optim::{sgd_step, OptimizerState};
use crate::train::schedule::LrSchedule;

/// How training inputs are produced.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Regime {
    /// Clean inputs.
    Standard,
    /// PGD adversarial examples.
    Pgd(AttackConfig),
    /// FGSM from a random start.
    FastAt { eps: f64, alpha: f64 },
}

impl Regime {
    /// Input-gradient passes per iteration.
    pub fn attack_steps(&self) -> usize {
        match self {
            Regime::Standard => 0,
            Regime::Pgd(cfg) => if cfg.eps == 0.0 { 0 } else { cfg.steps },
            Regime::FastAt { eps, .. } => usize::from(*eps != 0.0),
        }
    }

    pub fn attack(&self) -> Option<AttackConfig> {
        match *self {
            Regime::Standard => None,
            Regime::Pgd(cfg) => Some(cfg),
            Regime::FastAt { eps, alpha } => Some(AttackConfig {
                eps,
                alpha,
                steps: 1,
                random_start: true,
            }),
        }
    }
}

/// Everything an epoch needs besides the model and data.
#[derive(Debug, Clone)]
pub struct EpochConfig {
    pub batch_size: usize,
    pub regime: Regime,
    pub schedule: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub augment: bool,
    /// Iterations in the whole run (cyclic schedules need it).
    pub total_iterations: u64,
    pub seed: u64,
}

/// The batch just trained on, as seen by an iteration hook.
#[derive(Debug)]
pub struct StepInfo<'a, T> {
    /// Global iteration count after this step (1-based).
    pub iteration: u64,
    /// Inputs the step trained on (adversarial when attacking).
    pub inputs: &'a Tensor<T>,
    pub labels: &'a [usize],
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EpochStats {
    pub loss: f64,
    /// Accuracy on the (perturbed) training batches, in training mode.
    pub accuracy: f64,
    pub iterations: u64,
    pub flops: f64,
    /// Learning rate of the first iteration.
    pub lr: f64,
}

pub fn iterations_per_epoch(samples: usize, batch_size: usize) -> u64 {
    samples.div_ceil(batch_size) as u64
}

/// Called after every optimizer step; returns extra FLOPs spent.
pub type IterationHook<'h, T> = dyn FnMut(&mut Model<T>, &mut OptimizerState<T>, &StepInfo<'_, T>) -> Result<f64> + 'h;

/// Trains for one epoch (`epoch` is 0-based). `iteration` is the global
/// iteration counter and is advanced in place.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch<T: Real>(
    model: &mut Model<T>,
    opt: &mut OptimizerState<T>,
    data: &Dataset,
    cfg: &EpochConfig,
    flops: &FlopModel,
    epoch: usize,
    iteration: &mut u64,
    hook: &mut IterationHook<'_, T>,
) -> Result<EpochStats> {
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let e = epoch as u64;
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut stream(cfg.seed, e, Purpose::Shuffle));
    let mut aug_rng = stream(cfg.seed, e, Purpose::Augment);
    let mut attack_rng = stream(cfg.seed, e, Purpose::TrainAttack);
    let attack = cfg.regime.attack();
    let steps = cfg.regime.attack_steps();

    let mut stats = EpochStats::default();
    let mut correct = 0usize;
    let mut loss_sum = 0.0;
    for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let (x, y) = if cfg.augment {
            data.augmented_batch::<T, _>(chunk, 4, &mut aug_rng)
        } else {
            data.batch::<T>(chunk)
        };
        let inputs = match &attack {
            Some(a) if a.eps != 0.0 => perturb(&x, &pgd_attack(model, &x, &y, a, &mut attack_rng)?),
            _ => x,
        };
        let lr = cfg.schedule.lr(epoch, *iteration, cfg.total_iterations);
        if b == 0 {
            stats.lr = lr;
        }
        let densities = model.masks().densities();
        stats.flops += flops.iteration(&densities, chunk.len(), steps)?;

        let mut tape = model.forward(&inputs, Mode::Train)?;
        let loss = tape.cross_entropy(&y)?;
        let logits = tape.logits();
        let classes = logits.item_len();
        correct += logits
            .data()
            .chunks(classes)
            .zip(&y)
            .filter(|(row, &label)| argmax(row) == label)
            .count();
        loss_sum += loss.as_f64() * chunk.len() as f64;
        tape.backward(model, BackwardOptions::default())?;
        sgd_step(model, opt, lr, cfg.momentum, cfg.weight_decay)?;
        *iteration += 1;
        stats.iterations += 1;
        stats.flops += hook(
            model,
            opt,
            &StepInfo {
                iteration: *iteration,
                inputs: &inputs,
                labels: &y,
            },
        )?;
    }
    stats.loss = loss_sum / data.len() as f64;
    stats.accuracy = correct as f64 / data.len() as f64;
    Ok(stats)
}

/// [`train_epoch`] with PGD inputs and no hook.
pub fn train_adversarial_epoch<T: Real>(
    model: &mut Model<T>,
    opt: &mut OptimizerState<T>,
    data: &Dataset,
    cfg: &EpochConfig,
    flops: &FlopModel,
    epoch: usize,
    iteration: &mut u64,
) -> Result<EpochStats> {
    train_epoch(model, opt, data, cfg, flops, epoch, iteration, &mut |_, _, _| Ok(0.0))
}

/// [`train_epoch`] on clean inputs, ignoring the configured regime.
pub fn train_standard_epoch<T: Real>(
    model: &mut Model<T>,
    opt: &mut OptimizerState<T>,
    data: &Dataset,
    cfg: &EpochConfig,
    flops: &FlopModel,
    epoch: usize,
    iteration: &mut u64,
) -> Result<EpochStats> {
    let cfg = EpochConfig {
        regime: Regime::Standard,
        ..cfg.clone()
    };
    train_epoch(model, opt, data, &cfg, flops, epoch, iteration, &mut |_, _, _| Ok(0.0))
}
