//! Two-dimensional loss-surface grids around a trained model.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::attacks::AttackConfig;
use crate::data::Dataset;
use crate::error::Result;
use crate::metrics::eval::evaluate_accuracy;
use crate::model::Model;
use crate::real::Real;
use crate::rng::{stream, Purpose};

/// Grid coordinates `-radius..=radius` in `n` evenly spaced steps; a single
/// point sits at the origin.
pub fn grid_coordinates(n: usize, radius: f64) -> Vec<f64> {
    if n <= 1 {
        return vec![0.0; n];
    }
    (0..n).map(|i| -radius + 2.0 * radius * i as f64 / (n - 1) as f64).collect()
}

/// Evaluates `f(a, b)` on the `n × n` grid; row index follows `a`.
pub fn loss_grid<F>(n: usize, radius: f64, mut f: F) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(f64, f64) -> Result<f64>,
{
    let coords = grid_coordinates(n, radius);
    coords
        .iter()
        .map(|&a| coords.iter().map(|&b| f(a, b)).collect())
        .collect()
}

/// One random direction per weight tensor, rescaled per filter (first
/// dimension) to the norm of the matching filter of the model. Masked
/// positions are zero; 1-D parameters (biases, batch-norm) get no
/// perturbation.
pub fn filter_normalized_direction<T: Real, R: Rng + ?Sized>(model: &Model<T>, rng: &mut R) -> Vec<Vec<f64>> {
    model
        .params
        .iter()
        .map(|p| {
            let n = p.value.len();
            if p.value.shape().len() < 2 {
                return vec![0.0; n];
            }
            let mut d: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            if let Some(mask) = &p.mask {
                for i in mask.zeros_iter() {
                    d[i] = 0.0;
                }
            }
            let rows = p.value.shape()[0];
            let w = p.value.data();
            let per = n / rows;
            for r in 0..rows {
                let span = r * per..(r + 1) * per;
                let wn = w[span.clone()].iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
                let dn = d[span.clone()].iter().map(|v| v * v).sum::<f64>().sqrt();
                let scale = if dn > 0.0 { wn / dn } else { 0.0 };
                d[span].iter_mut().for_each(|v| *v *= scale);
            }
            d
        })
        .collect()
}

fn dot(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>()).sum()
}

/// Removes from `d2` its component along `d1`.
pub fn orthogonalize(d1: &[Vec<f64>], d2: &mut [Vec<f64>]) {
    let nn = dot(d1, d1);
    if nn == 0.0 {
        return;
    }
    let c = dot(d1, d2) / nn;
    for (u, v) in d1.iter().zip(d2.iter_mut()) {
        for (p, q) in u.iter().zip(v.iter_mut()) {
            *q -= c * p;
        }
    }
}

/// `θ + a·d1 + b·d2` with masks re-applied.
pub fn displaced<T: Real>(model: &Model<T>, d1: &[Vec<f64>], d2: &[Vec<f64>], a: f64, b: f64) -> Model<T> {
    let mut m = model.clone();
    for ((p, u), v) in m.params.iter_mut().zip(d1).zip(d2) {
        for ((w, &x), &y) in p.value.data_mut().iter_mut().zip(u).zip(v) {
            *w = T::lit(w.as_f64() + a * x + b * y);
        }
        p.apply_mask();
    }
    m
}

/// Adversarial (or clean, without an attack) loss on `data` over an
/// `n × n` grid spanned by two orthogonalized filter-normalized directions.
pub fn loss_surface_grid<T: Real>(
    model: &Model<T>,
    data: &Dataset,
    n: usize,
    radius: f64,
    attack: Option<&AttackConfig>,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let mut rng = stream(seed, 0, Purpose::Surface);
    let d1 = filter_normalized_direction(model, &mut rng);
    let mut d2 = filter_normalized_direction(model, &mut rng);
    orthogonalize(&d1, &mut d2);
    loss_grid(n, radius, |a, b| {
        let m = displaced(model, &d1, &d2, a, b);
        let mut attack_rng = stream(seed, 1, Purpose::Surface);
        Ok(evaluate_accuracy(&m, data, attack, 128, &mut attack_rng)?.loss)
    })
}
