//! Magnitude and gradient based selection of mask positions.
//!
//! Every ranking breaks ties by ascending (layer, element) index.

use std::cmp::Ordering;

use super::mask::{LayerMask, SparsityMask};
use crate::error::{Error, Result};
use crate::real::Real;

/// Keeps the `keep` highest-scoring positions across all layers.
pub fn global_top_k(scores: &[Vec<f64>], keep: usize) -> Vec<LayerMask> {
    let mut order: Vec<(usize, usize)> = scores
        .iter()
        .enumerate()
        .flat_map(|(l, s)| (0..s.len()).map(move |i| (l, i)))
        .collect();
    let key = |&(l, i): &(usize, usize)| scores[l][i];
    order.sort_by(|a, b| key(b).total_cmp(&key(a)).then(a.cmp(b)));
    let mut masks: Vec<LayerMask> = scores.iter().map(|s| LayerMask::zeros(s.len())).collect();
    for &(l, i) in order.iter().take(keep) {
        masks[l].set(i, true);
    }
    masks
}

/// Number of positions kept at sparsity `s` out of `total`.
pub fn kept_count(total: usize, sparsity: f64) -> usize {
    ((1.0 - sparsity) * total as f64).round() as usize
}

/// Global one-shot magnitude pruning: keeps the `1 − s` fraction of weights
/// with the largest |w|, ranked across layers.
pub fn global_magnitude_mask<T: Real>(names: Vec<String>, weights: &[&[T]], sparsity: f64) -> Result<SparsityMask> {
    check_sparsity(sparsity)?;
    let scores: Vec<Vec<f64>> = weights
        .iter()
        .map(|w| w.iter().map(|v| v.as_f64().abs()).collect())
        .collect();
    let total = scores.iter().map(Vec::len).sum();
    let layers = global_top_k(&scores, kept_count(total, sparsity));
    Ok(SparsityMask::new(names, layers))
}

pub(crate) fn check_sparsity(s: f64) -> Result<()> {
    if (0.0..1.0).contains(&s) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("sparsity {s} outside [0, 1)")))
    }
}

fn by_key_then_index(a: (f64, usize), b: (f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// Active positions with the smallest |w|.
pub fn select_prune<T: Real>(mask: &LayerMask, weights: &[T], count: usize) -> Vec<usize> {
    let mut cand: Vec<(f64, usize)> = mask.ones_iter().map(|i| (weights[i].as_f64().abs(), i)).collect();
    cand.sort_by(|&a, &b| by_key_then_index(a, b));
    cand.into_iter().take(count).map(|(_, i)| i).collect()
}

/// Inactive positions with the largest |g|.
pub fn select_grow<T: Real>(mask: &LayerMask, grads: &[T], count: usize) -> Vec<usize> {
    let mut cand: Vec<(f64, usize)> = mask.zeros_iter().map(|i| (-grads[i].as_f64().abs(), i)).collect();
    cand.sort_by(|&a, &b| by_key_then_index(a, b));
    cand.into_iter().take(count).map(|(_, i)| i).collect()
}

/// Deactivates `counts[l]` active positions with the smallest |w| in each
/// layer. Returns the pruned indices per layer.
pub fn prune_lowest_magnitude<T: Real>(mask: &mut SparsityMask, weights: &[&[T]], counts: &[usize]) -> Result<Vec<Vec<usize>>> {
    check_layers(mask, weights.len(), counts.len())?;
    for (l, (m, &c)) in mask.layers.iter().zip(counts).enumerate() {
        if c > m.active() {
            return Err(Error::CountExceeds {
                layer: l,
                requested: c,
                available: m.active(),
            });
        }
    }
    let mut pruned = Vec::with_capacity(counts.len());
    for ((m, w), &c) in mask.layers.iter_mut().zip(weights).zip(counts) {
        let idx = select_prune(m, w, c);
        for &i in &idx {
            m.set(i, false);
        }
        pruned.push(idx);
    }
    Ok(pruned)
}

/// Activates `counts[l]` inactive positions with the largest |gradient| in
/// each layer and sets the new weights to exactly zero. Returns the grown
/// indices per layer.
pub fn grow_largest_gradient<T: Real>(
    mask: &mut SparsityMask,
    grads: &[&[T]],
    counts: &[usize],
    weights: &mut [&mut [T]],
) -> Result<Vec<Vec<usize>>> {
    check_layers(mask, grads.len(), counts.len())?;
    check_layers(mask, weights.len(), counts.len())?;
    for (l, (m, &c)) in mask.layers.iter().zip(counts).enumerate() {
        if c > m.inactive() {
            return Err(Error::CountExceeds {
                layer: l,
                requested: c,
                available: m.inactive(),
            });
        }
    }
    let mut grown = Vec::with_capacity(counts.len());
    for (((m, g), &c), w) in mask.layers.iter_mut().zip(grads).zip(counts).zip(weights.iter_mut()) {
        let idx = select_grow(m, g, c);
        for &i in &idx {
            m.set(i, true);
            w[i] = T::zero();
        }
        grown.push(idx);
    }
    Ok(grown)
}

fn check_layers(mask: &SparsityMask, a: usize, b: usize) -> Result<()> {
    let n = mask.layers.len();
    if a != n {
        return Err(Error::LengthMismatch(n, a));
    }
    if b != n {
        return Err(Error::LengthMismatch(n, b));
    }
    Ok(())
}
