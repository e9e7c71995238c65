//! Layer-wise density allocation for a global sparsity budget.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::mask::{LayerMask, SparsityMask};
use super::select::{check_sparsity, global_top_k, kept_count};
use crate::autodiff::BackwardOptions;
use crate::error::{Error, Result};
use crate::model::{Mode, Model};
use crate::models::Fan;
use crate::real::Real;
use crate::tensor::Tensor;

/// Target density per prunable layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AllocationPlan {
    pub sizes: Vec<usize>,
    pub densities: Vec<f64>,
    /// Global fraction of prunable parameters removed.
    pub sparsity: f64,
}

impl AllocationPlan {
    /// `round(density · n)` per layer.
    pub fn kept_counts(&self) -> Vec<usize> {
        self.sizes
            .iter()
            .zip(&self.densities)
            .map(|(&n, &d)| ((d * n as f64).round() as usize).min(n))
            .collect()
    }

    /// Budget in elements: `(1 − s) · Σ n`.
    pub fn budget(&self) -> f64 {
        (1.0 - self.sparsity) * self.sizes.iter().sum::<usize>() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Allocator {
    Uniform,
    Erk,
    Igq,
    Snip,
}

impl std::str::FromStr for Allocator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "uniform" => Ok(Allocator::Uniform),
            "erk" => Ok(Allocator::Erk),
            "igq" => Ok(Allocator::Igq),
            "snip" => Ok(Allocator::Snip),
            other => Err(Error::InvalidArgument(format!("unknown allocator {other:?}"))),
        }
    }
}

fn check_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.is_empty() || sizes.iter().sum::<usize>() == 0 {
        return Err(Error::BudgetInfeasible("no prunable parameters".into()));
    }
    Ok(())
}

pub fn allocate_uniform(sizes: &[usize], sparsity: f64) -> Result<AllocationPlan> {
    check_sparsity(sparsity)?;
    check_sizes(sizes)?;
    Ok(AllocationPlan {
        sizes: sizes.to_vec(),
        densities: vec![1.0 - sparsity; sizes.len()],
        sparsity,
    })
}

/// Erdős–Rényi-Kernel allocation: `density_l = min(1, c · r_l)` where `r_l`
/// is (fan-in + fan-out [+ kernel dims]) / numel. Layers that saturate at 1
/// are frozen and `c` is re-solved over the rest.
pub fn allocate_erk(fans: &[Fan], sparsity: f64) -> Result<AllocationPlan> {
    check_sparsity(sparsity)?;
    let sizes: Vec<usize> = fans.iter().map(Fan::numel).collect();
    check_sizes(&sizes)?;
    let ratio: Vec<f64> = fans
        .iter()
        .map(|f| match *f {
            Fan::Linear { fan_in, fan_out } => (fan_in + fan_out) as f64 / (fan_in * fan_out) as f64,
            Fan::Conv { in_ch, out_ch, kh, kw } => {
                (in_ch + out_ch + kh + kw) as f64 / (in_ch * out_ch * kh * kw) as f64
            }
        })
        .collect();
    let budget = (1.0 - sparsity) * sizes.iter().sum::<usize>() as f64;
    let mut frozen = vec![false; fans.len()];
    loop {
        let fixed: f64 = sizes.iter().zip(&frozen).filter(|(_, &f)| f).map(|(&n, _)| n as f64).sum();
        let weight: f64 = sizes
            .iter()
            .zip(&ratio)
            .zip(&frozen)
            .filter(|(_, &f)| !f)
            .map(|((&n, &r), _)| r * n as f64)
            .sum();
        if weight == 0.0 {
            if (fixed - budget).abs() > 0.5 {
                return Err(Error::BudgetInfeasible(format!("ERK cannot meet budget {budget}")));
            }
            return Ok(AllocationPlan {
                sizes,
                densities: vec![1.0; fans.len()],
                sparsity,
            });
        }
        let c = (budget - fixed) / weight;
        if c < 0.0 {
            return Err(Error::BudgetInfeasible(format!("ERK cannot meet budget {budget}")));
        }
        let newly: Vec<usize> = (0..fans.len()).filter(|&l| !frozen[l] && c * ratio[l] > 1.0).collect();
        if newly.is_empty() {
            let densities = (0..fans.len())
                .map(|l| if frozen[l] { 1.0 } else { c * ratio[l] })
                .collect();
            return Ok(AllocationPlan {
                sizes,
                densities,
                sparsity,
            });
        }
        for l in newly {
            frozen[l] = true;
        }
    }
}

/// Ideal-gas-quota allocation in the form `density_l = λ / (λ + n_l)`, with
/// λ > 0 solved by bisection so that Σ density_l · n_l meets the budget.
pub fn allocate_igq(sizes: &[usize], sparsity: f64) -> Result<AllocationPlan> {
    check_sparsity(sparsity)?;
    check_sizes(sizes)?;
    if sparsity == 0.0 {
        return Ok(AllocationPlan {
            sizes: sizes.to_vec(),
            densities: vec![1.0; sizes.len()],
            sparsity,
        });
    }
    let budget = (1.0 - sparsity) * sizes.iter().sum::<usize>() as f64;
    let kept = |lambda: f64| -> f64 { sizes.iter().map(|&n| n as f64 * lambda / (lambda + n as f64)).sum() };
    // kept(λ) increases from 0 to Σn; bracket in log space.
    let (mut lo, mut hi) = (-60.0f64, 60.0f64);
    if kept(hi.exp()) < budget {
        return Err(Error::BudgetInfeasible(format!("IGQ cannot meet budget {budget}")));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if kept(mid.exp()) < budget {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let lambda = (0.5 * (lo + hi)).exp();
    Ok(AllocationPlan {
        sizes: sizes.to_vec(),
        densities: sizes.iter().map(|&n| lambda / (lambda + n as f64)).collect(),
        sparsity,
    })
}

/// Connection-sensitivity pruning at initialisation: saliency `|g ⊙ w|` from
/// one dense backward pass, global top `1 − s` kept.
pub fn allocate_snip<T: Real>(model: &Model<T>, x: &Tensor<T>, labels: &[usize], sparsity: f64) -> Result<(AllocationPlan, SparsityMask)> {
    check_sparsity(sparsity)?;
    if labels.is_empty() {
        return Err(Error::Empty("calibration batch"));
    }
    let mut probe = model.clone();
    let mut tape = probe.forward(x, Mode::Train)?;
    tape.cross_entropy(labels)?;
    tape.backward(&mut probe, BackwardOptions { input_grad: false, dense: true })?;
    let idx = probe.prunable_indices();
    let names: Vec<String> = idx.iter().map(|&i| probe.params[i].name.clone()).collect();
    let scores: Vec<Vec<f64>> = idx
        .iter()
        .map(|&i| {
            let p = &probe.params[i];
            p.grad
                .data()
                .iter()
                .zip(p.value.data())
                .map(|(g, w)| (g.as_f64() * w.as_f64()).abs())
                .collect()
        })
        .collect();
    Ok(snip_from_scores(names, &scores, sparsity))
}

pub(crate) fn snip_from_scores(names: Vec<String>, scores: &[Vec<f64>], sparsity: f64) -> (AllocationPlan, SparsityMask) {
    let total = scores.iter().map(Vec::len).sum();
    let mask = SparsityMask::new(names, global_top_k(scores, kept_count(total, sparsity)));
    let plan = AllocationPlan {
        sizes: scores.iter().map(Vec::len).collect(),
        densities: mask.densities(),
        sparsity,
    };
    (plan, mask)
}

/// Per layer, `round(density · n)` positions chosen uniformly without
/// replacement.
pub fn sample_random_mask(names: Vec<String>, plan: &AllocationPlan, seed: u64) -> SparsityMask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = plan
        .sizes
        .iter()
        .zip(plan.kept_counts())
        .map(|(&n, k)| {
            if k == n {
                return LayerMask::ones(n);
            }
            let mut m = LayerMask::zeros(n);
            for i in sample(&mut rng, n, k).into_iter() {
                m.set(i, true);
            }
            m
        })
        .collect();
    SparsityMask::new(names, layers)
}
