//! Dynamic sparse training: periodic magnitude pruning and gradient-based
//! regrowth, with optional trend-driven adaptation of the two ratios.

use std::collections::VecDeque;
use std::f64::consts::PI;

use crate::autodiff::BackwardOptions;
use crate::error::{Error, Result};
use crate::model::{Mode, Model};
use crate::real::Real;
use crate::sparsity::{select_grow, select_prune, Allocator, LayerMask};
use crate::tensor::Tensor;
use crate::train::optim::OptimizerState;

#[derive(Debug, Clone, PartialEq)]
pub struct FbConfig {
    pub sparsity: f64,
    pub allocator: Allocator,
    /// Iterations between topology updates.
    pub update_interval: u64,
    /// Initial update ratio.
    pub k0: f64,
    /// Adapt prune/grow ratios from generalization trends.
    pub adaptive: bool,
    pub queue_len: usize,
    /// Minimum fraction of increasing consecutive pairs that triggers a boost.
    pub freq_threshold: f64,
    pub prune_boost: f64,
    pub grow_boost: f64,
    /// Adaptation only after this many epochs.
    pub adapt_start: usize,
}

impl Default for FbConfig {
    fn default() -> Self {
        Self {
            sparsity: 0.8,
            allocator: Allocator::Igq,
            update_interval: 2000,
            k0: 0.5,
            adaptive: false,
            queue_len: 5,
            freq_threshold: 0.6,
            prune_boost: 0.004,
            grow_boost: 0.0005,
            adapt_start: 50,
        }
    }
}

impl FbConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.k0) {
            return Err(Error::InvalidArgument(format!("fb k0 {} outside [0, 1]", self.k0)));
        }
        if self.update_interval == 0 {
            return Err(Error::InvalidArgument("fb update interval must be >= 1".into()));
        }
        if self.queue_len < 2 {
            return Err(Error::InvalidArgument("fb queue length must be >= 2".into()));
        }
        if !(0.0..1.0).contains(&self.sparsity) {
            return Err(Error::InvalidArgument(format!("fb sparsity {} outside [0, 1)", self.sparsity)));
        }
        Ok(())
    }
}

/// `k(t) = (k0 / 2)(1 + cos(π t / T))`.
pub fn cosine_update_ratio(k0: f64, t: f64, total: f64) -> f64 {
    if total <= 0.0 {
        return k0;
    }
    0.5 * k0 * (1.0 + (PI * t.clamp(0.0, total) / total).cos())
}

/// Fraction of strictly increasing consecutive pairs.
pub fn increasing_frequency(queue: &[f64]) -> f64 {
    if queue.len() < 2 {
        return 0.0;
    }
    let up = queue.windows(2).filter(|w| w[1] > w[0]).count();
    up as f64 / (queue.len() - 1) as f64
}

/// Whether each ratio is boosted: `(prune, grow)`.
pub fn fb_plus_triggers(gaps: &[f64], val_losses: &[f64], epoch: usize, cfg: &FbConfig) -> (bool, bool) {
    if epoch <= cfg.adapt_start {
        return (false, false);
    }
    let fire = |q: &[f64]| q.len() >= cfg.queue_len && increasing_frequency(q) >= cfg.freq_threshold;
    (fire(gaps), fire(val_losses))
}

/// Prune and grow ratios for update ratio `k` after `epoch` epochs.
pub fn fb_plus_adapt(gaps: &[f64], val_losses: &[f64], k: f64, epoch: usize, cfg: &FbConfig) -> (f64, f64) {
    let (bp, bg) = fb_plus_triggers(gaps, val_losses, epoch, cfg);
    (
        if bp { (1.0 + cfg.prune_boost) * k } else { k },
        if bg { (1.0 + cfg.grow_boost) * k } else { k },
    )
}

/// Per-layer outcome of one topology update, indices into each prunable
/// parameter.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TopologyUpdate {
    pub pruned: Vec<Vec<usize>>,
    pub grown: Vec<Vec<usize>>,
}

/// Prune and grow counts for a layer with `active` of `len` positions on.
/// Growth is limited to positions inactive before pruning; any shortfall is
/// taken off the prune count too, so the net change `prune − grow` matches
/// `round(p·active) − round(g·active)` whenever it can.
pub fn update_counts(active: usize, len: usize, p: f64, g: f64) -> (usize, usize) {
    let a = active as f64;
    let mut prune = ((p * a).round() as usize).min(active);
    let mut grow = (g * a).round() as usize;
    let room = len - active;
    if grow > room {
        prune = prune.saturating_sub(grow - room);
        grow = room;
    }
    (prune, grow)
}

/// One prune/grow step on every prunable layer. Dense gradients come from
/// a training-mode pass on `(x, labels)` that leaves running statistics
/// untouched. Weights and momentum of pruned and grown positions are zero
/// afterwards.
pub fn fb_topology_update<T: Real>(
    model: &mut Model<T>,
    opt: &mut OptimizerState<T>,
    x: &Tensor<T>,
    labels: &[usize],
    p: f64,
    g: f64,
) -> Result<TopologyUpdate> {
    let (mut tape, _) = model.record(x, Mode::Train)?;
    tape.cross_entropy(labels)?;
    tape.backward(model, BackwardOptions { input_grad: false, dense: true })?;
    let mut update = TopologyUpdate::default();
    for i in model.prunable_indices() {
        let param = &mut model.params[i];
        let len = param.value.len();
        let mask = param.mask.get_or_insert_with(|| LayerMask::ones(len));
        let (np, ng) = update_counts(mask.active(), mask.len(), p, g);
        let grow = select_grow(mask, param.grad.data(), ng);
        let prune = select_prune(mask, param.value.data(), np);
        for &j in &prune {
            mask.set(j, false);
        }
        for &j in &grow {
            mask.set(j, true);
        }
        let w = param.value.data_mut();
        for &j in prune.iter().chain(&grow) {
            w[j] = T::zero();
        }
        opt.reset(i, &prune);
        opt.reset(i, &grow);
        update.pruned.push(prune);
        update.grown.push(grow);
    }
    model.zero_grads();
    Ok(update)
}

/// Trend queues for the adaptive variant.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrendQueues {
    /// Per-epoch robust generalization gaps (train − validation RA).
    pub gaps: VecDeque<f64>,
    /// Per-epoch robust validation losses.
    pub val_losses: VecDeque<f64>,
}

impl TrendQueues {
    pub fn push(&mut self, gap: f64, val_loss: f64, len: usize) {
        for (q, v) in [(&mut self.gaps, gap), (&mut self.val_losses, val_loss)] {
            if q.len() == len {
                q.pop_front();
            }
            q.push_back(v);
        }
    }

    pub fn gaps_vec(&self) -> Vec<f64> {
        self.gaps.iter().copied().collect()
    }

    pub fn val_losses_vec(&self) -> Vec<f64> {
        self.val_losses.iter().copied().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ModelSpec;
    use crate::sparsity::{sparsity_of, SparsityMask};

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_update_ratio(0.5, 0.0, 100.0), 0.5);
        assert!(cosine_update_ratio(0.5, 100.0, 100.0).abs() < 1e-16);
        assert!((cosine_update_ratio(0.5, 50.0, 100.0) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn adapt_examples() {
        let cfg = FbConfig {
            adapt_start: 10,
            ..Default::default()
        };
        let qp = [0.10, 0.12, 0.11, 0.13, 0.14];
        let dec = [5.0, 4.0, 3.0, 2.0, 1.0];
        assert_eq!(increasing_frequency(&qp), 0.75);
        let (p, g) = fb_plus_adapt(&qp, &dec, 0.2, 11, &cfg);
        assert!((p - 1.004 * 0.2).abs() < 1e-15);
        assert_eq!(g, 0.2);
        assert_eq!(fb_plus_adapt(&qp, &qp, 0.2, 10, &cfg), (0.2, 0.2));
        assert_eq!(fb_plus_adapt(&qp[..4], &qp[..4], 0.2, 11, &cfg), (0.2, 0.2));
    }

    #[test]
    fn count_arithmetic() {
        assert_eq!(update_counts(10, 50, 0.2, 0.2), (2, 2));
        assert_eq!(update_counts(10, 50, 0.0, 0.0), (0, 0));
        assert_eq!(update_counts(10, 50, 0.3, 0.1), (3, 1));
        assert_eq!(update_counts(10, 11, 0.3, 0.3), (1, 1));
        assert_eq!(update_counts(10, 10, 0.2, 0.2), (0, 0));
    }

    #[test]
    fn update_preserves_counts_and_zeroes_new_weights() {
        let spec = ModelSpec::mlp(6, &[10], 3);
        let mut m: Model<f64> = Model::build(&spec, 1).unwrap();
        let mask = SparsityMask::new(
            vec!["l0.weight".into(), "l2.weight".into()],
            vec![
                LayerMask::from_bools(&(0..60).map(|i| i % 3 == 0).collect::<Vec<_>>()),
                LayerMask::from_bools(&(0..30).map(|i| i % 2 == 0).collect::<Vec<_>>()),
            ],
        );
        m.set_masks(&mask).unwrap();
        let mut opt = OptimizerState::new(&m);
        opt.velocity.iter_mut().for_each(|v| v.fill(1.0));
        opt.zero_masked(&m);
        let x = Tensor::from_f64(&[4, 6], &(0..24).map(|i| (i as f64 * 0.37).sin().abs()).collect::<Vec<_>>()).unwrap();
        let before = sparsity_of(&m.masks());
        let up = fb_topology_update(&mut m, &mut opt, &x, &[0, 1, 2, 0], 0.2, 0.2).unwrap();
        assert_eq!(sparsity_of(&m.masks()), before);
        assert_eq!(up.pruned[0].len(), 4);
        assert_eq!(up.grown[1].len(), 3);
        for (l, &pi) in m.prunable_indices().iter().enumerate() {
            for &j in &up.grown[l] {
                assert_eq!(m.params[pi].value.data()[j], 0.0);
                assert_eq!(opt.velocity[pi].data()[j], 0.0);
                assert!(!up.pruned[l].contains(&j));
            }
            for &j in &up.pruned[l] {
                assert_eq!(opt.velocity[pi].data()[j], 0.0);
            }
        }
    }
}
