//! Epoch loop with per-epoch evaluation, shared by the dense, static-sparse
//! and dynamic-sparse procedures.

use std::time::Instant;

use crate::attacks::AttackConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{evaluate_accuracy, FlopModel, MetricsRecord};
use crate::model::Model;
use crate::models::{weight_layers, ModelSpec};
use crate::real::Real;
use crate::rng::{stream, Purpose};
use crate::sparsity::{
    allocate_erk, allocate_igq, allocate_snip, allocate_uniform, sample_random_mask, sparsity_of, AllocationPlan,
    Allocator, SparsityMask,
};
use crate::train::epoch::{iterations_per_epoch, train_epoch, EpochConfig, Regime};
use crate::train::flying_bird::{cosine_update_ratio, fb_plus_triggers, fb_topology_update, FbConfig, TopologyUpdate, TrendQueues};
use crate::train::optim::OptimizerState;
use crate::train::schedule::LrSchedule;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub regime: Regime,
    /// Attack used for every robust-accuracy measurement.
    pub eval_attack: AttackConfig,
    /// Random crop and flip on image data.
    pub augment: bool,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 128,
            schedule: LrSchedule::multistep(0.1, &[100, 150]),
            momentum: 0.9,
            weight_decay: 5e-4,
            regime: Regime::Pgd(AttackConfig::pgd(8.0 / 255.0, 2.0 / 255.0, 10)),
            eval_attack: AttackConfig::pgd(8.0 / 255.0, 2.0 / 255.0, 20),
            augment: true,
            eval_batch_size: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::InvalidArgument("batch sizes must be positive".into()));
        }
        if let LrSchedule::MultiStep { milestones, .. } = &self.schedule {
            if milestones.windows(2).any(|w| w[0] > w[1]) {
                return Err(Error::InvalidArgument("milestones must be ascending".into()));
            }
        }
        if let Some(a) = self.regime.attack() {
            a.validate()?;
        }
        self.eval_attack.validate()
    }

    pub fn epoch_config(&self, seed: u64, train_len: usize) -> EpochConfig {
        EpochConfig {
            batch_size: self.batch_size,
            regime: self.regime,
            schedule: self.schedule.clone(),
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            augment: self.augment,
            total_iterations: iterations_per_epoch(train_len, self.batch_size) * self.epochs as u64,
            seed,
        }
    }
}

/// How the sparse connectivity evolves during training.
#[derive(Debug, Clone, PartialEq)]
pub enum Topology {
    Dense,
    /// Masks installed on the model stay fixed.
    Static,
    /// Periodic prune/grow updates.
    Dynamic(FbConfig),
}

/// Training data plus the evaluation sets.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    /// Fixed subset of `train` used to measure training robust accuracy.
    pub train_eval: Dataset,
}

impl Splits {
    /// Holds out `val_fraction` of `train` as validation and samples
    /// `train_eval_size` of the remainder for training-set evaluation.
    pub fn new(train: &Dataset, test: Dataset, val_fraction: f64, train_eval_size: usize, seed: u64) -> Result<Self> {
        let (train, val) = train.split(val_fraction, seed)?;
        let train_eval = train.sample(train_eval_size, seed ^ 0x5eed);
        Ok(Self {
            train,
            val,
            test,
            train_eval,
        })
    }
}

/// What an iteration observer sees after each optimizer step (and after
/// the topology update, when one fired).
pub struct IterationEvent<'a, T> {
    pub iteration: u64,
    pub model: &'a Model<T>,
    pub opt: &'a OptimizerState<T>,
    pub update: Option<&'a TopologyUpdate>,
}

/// Complete state of a training run; everything needed to resume at an
/// epoch boundary.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub model: Model<T>,
    pub opt: OptimizerState<T>,
    pub cfg: TrainConfig,
    pub topology: Topology,
    pub seed: u64,
    /// Completed epochs.
    pub epoch: usize,
    pub iteration: u64,
    /// Cumulative training FLOPs, including any offset carried in (a ticket
    /// search or pretraining phase).
    pub cum_flops: f64,
    pub history: Vec<MetricsRecord>,
    pub trends: TrendQueues,
    /// Current prune/grow boost flags of the adaptive variant.
    pub boost: (bool, bool),
    pub topology_updates: u64,
    /// Model at the best validation robust accuracy so far, with its index in
    /// `history`.
    pub best: Option<(usize, Model<T>)>,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: Model<T>, cfg: TrainConfig, topology: Topology, seed: u64, flops_offset: f64) -> Result<Self> {
        cfg.validate()?;
        if let Topology::Dynamic(fb) = &topology {
            fb.validate()?;
        }
        Ok(Self {
            opt: OptimizerState::new(&model),
            model,
            cfg,
            topology,
            seed,
            epoch: 0,
            iteration: 0,
            cum_flops: flops_offset,
            history: Vec::new(),
            trends: TrendQueues::default(),
            boost: (false, false),
            topology_updates: 0,
            best: None,
        })
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.cfg.epochs
    }

    /// Evaluates the live model; `epoch` keys the attack streams.
    pub fn evaluate(&self, splits: &Splits, epoch: usize) -> Result<MetricsRecord> {
        evaluate_record(&self.model, &self.cfg, splits, self.seed, epoch)
    }

    pub fn run_epoch(&mut self, splits: &Splits) -> Result<&MetricsRecord> {
        self.run_epoch_with(splits, &mut |_| {})
    }

    /// Trains one epoch, evaluates, and appends a metrics row. `observer`
    /// sees the model after every iteration.
    pub fn run_epoch_with(&mut self, splits: &Splits, observer: &mut dyn FnMut(&IterationEvent<'_, T>)) -> Result<&MetricsRecord> {
        let start = Instant::now();
        let flop_model = FlopModel::new(&self.model.spec)?;
        let ecfg = self.cfg.epoch_config(self.seed, splits.train.len());
        let total = ecfg.total_iterations;
        let dynamic = match &self.topology {
            Topology::Dynamic(fb) => Some(fb.clone()),
            _ => None,
        };
        let boost = self.boost;
        let mut updates = 0;
        let stats = train_epoch(
            &mut self.model,
            &mut self.opt,
            &splits.train,
            &ecfg,
            &flop_model,
            self.epoch,
            &mut self.iteration,
            &mut |model, opt, step| {
                let mut extra = 0.0;
                let mut update = None;
                if let Some(fb) = &dynamic {
                    if step.iteration % fb.update_interval == 0 {
                        let k = cosine_update_ratio(fb.k0, step.iteration as f64, total as f64);
                        let p = if boost.0 { (1.0 + fb.prune_boost) * k } else { k };
                        let g = if boost.1 { (1.0 + fb.grow_boost) * k } else { k };
                        let b = step.labels.len() as f64;
                        extra = flop_model.forward(&model.masks().densities())? * b + 2.0 * flop_model.dense_forward() * b;
                        update = Some(fb_topology_update(model, opt, step.inputs, step.labels, p, g)?);
                        updates += 1;
                    }
                }
                observer(&IterationEvent {
                    iteration: step.iteration,
                    model,
                    opt,
                    update: update.as_ref(),
                });
                Ok(extra)
            },
        )?;
        self.topology_updates += updates;
        self.cum_flops += stats.flops;
        self.epoch += 1;

        let mut rec = self.evaluate(splits, self.epoch)?;
        rec.lr = stats.lr;
        rec.cum_train_flops = self.cum_flops;
        rec.wall_time_s = start.elapsed().as_secs_f64();
        if let Some(fb) = &dynamic {
            if fb.adaptive {
                self.trends.push(rec.train_ra - rec.val_ra, rec.val_robust_loss, fb.queue_len);
                self.boost = fb_plus_triggers(&self.trends.gaps_vec(), &self.trends.val_losses_vec(), self.epoch, fb);
            }
        }
        let improved = self.best.as_ref().is_none_or(|(i, _)| rec.val_ra > self.history[*i].val_ra);
        self.history.push(rec);
        if improved {
            self.best = Some((self.history.len() - 1, self.model.clone()));
        }
        Ok(self.history.last().expect("just pushed"))
    }

    /// Runs the remaining epochs.
    pub fn run(&mut self, splits: &Splits) -> Result<()> {
        while !self.finished() {
            self.run_epoch(splits)?;
        }
        Ok(())
    }
}

/// Metrics of `model` on every split (without lr, FLOPs or timing).
pub fn evaluate_record<T: Real>(model: &Model<T>, cfg: &TrainConfig, splits: &Splits, seed: u64, epoch: usize) -> Result<MetricsRecord> {
    let e = epoch as u64;
    let atk = Some(&cfg.eval_attack);
    let bs = cfg.eval_batch_size;
    let train = evaluate_accuracy(model, &splits.train_eval, atk, bs, &mut stream(seed, e, Purpose::EvalTrain))?;
    let val = evaluate_accuracy(model, &splits.val, atk, bs, &mut stream(seed, e, Purpose::EvalVal))?;
    let test = evaluate_accuracy(model, &splits.test, atk, bs, &mut stream(seed, e, Purpose::EvalTest))?;
    let clean = evaluate_accuracy(model, &splits.test, None, bs, &mut stream(seed, e, Purpose::EvalTest))?;
    let masks = model.masks();
    Ok(MetricsRecord {
        epoch,
        lr: 0.0,
        train_ra: train.accuracy,
        val_ra: val.accuracy,
        test_ra: test.accuracy,
        test_sa: clean.accuracy,
        val_robust_loss: val.loss,
        sparsity: sparsity_of(&masks),
        active_params: masks.active(),
        cum_train_flops: 0.0,
        wall_time_s: 0.0,
    })
}

/// Layer-wise plan for `model`'s prunable weights. SNIP also returns its
/// saliency mask, computed on `calibration`.
pub fn allocate<T: Real>(
    model: &Model<T>,
    allocator: Allocator,
    sparsity: f64,
    calibration: &Dataset,
) -> Result<(AllocationPlan, Option<SparsityMask>)> {
    let layers: Vec<_> = weight_layers(&model.spec)?.into_iter().filter(|w| w.prunable).collect();
    let sizes: Vec<usize> = layers.iter().map(|w| w.fan.numel()).collect();
    Ok(match allocator {
        Allocator::Uniform => (allocate_uniform(&sizes, sparsity)?, None),
        Allocator::Erk => {
            let fans: Vec<_> = layers.iter().map(|w| w.fan).collect();
            (allocate_erk(&fans, sparsity)?, None)
        }
        Allocator::Igq => (allocate_igq(&sizes, sparsity)?, None),
        Allocator::Snip => {
            let idx: Vec<usize> = (0..calibration.len()).collect();
            let (x, y) = calibration.batch::<T>(&idx);
            let (plan, mask) = allocate_snip(model, &x, &y, sparsity)?;
            (plan, Some(mask))
        }
    })
}

/// Plan from `allocator`, then a random mask with those densities.
pub fn random_sparse_mask<T: Real>(model: &Model<T>, allocator: Allocator, sparsity: f64, calibration: &Dataset, seed: u64) -> Result<SparsityMask> {
    let (plan, _) = allocate(model, allocator, sparsity, calibration)?;
    let names = model.masks().names;
    Ok(sample_random_mask(names, &plan, stream_seed(seed)))
}

fn stream_seed(seed: u64) -> u64 {
    use rand::RngCore;
    stream(seed, 0, Purpose::Mask).next_u64()
}

/// Builds a model from `spec`, installs a random mask drawn from `fb`'s
/// allocator, and trains it with periodic prune/grow updates.
pub fn run_flying_bird<T: Real>(spec: &ModelSpec, splits: &Splits, fb: &FbConfig, cfg: &TrainConfig, seed: u64) -> Result<Trainer<T>> {
    let mut model = Model::build(spec, seed)?;
    let calib = splits.train.head(cfg.batch_size);
    let mask = random_sparse_mask(&model, fb.allocator, fb.sparsity, &calib, seed)?;
    model.set_masks(&mask)?;
    let mut trainer = Trainer::new(model, cfg.clone(), Topology::Dynamic(fb.clone()), seed, 0.0)?;
    trainer.run(splits)?;
    Ok(trainer)
}
