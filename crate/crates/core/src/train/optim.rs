//! SGD with momentum and weight decay.

use crate::error::{Error, Result};
use crate::model::Model;
use crate::real::Real;
use crate::tensor::Tensor;

/// Momentum buffers, one per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub velocity: Vec<Tensor<T>>,
    pub step: u64,
    pub lr: f64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(model: &Model<T>) -> Self {
        Self {
            velocity: model.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            step: 0,
            lr: 0.0,
        }
    }

    /// Zeroes the momentum of parameter `param` at `indices`.
    pub fn reset(&mut self, param: usize, indices: &[usize]) {
        let v = self.velocity[param].data_mut();
        for &i in indices {
            v[i] = T::zero();
        }
    }

    /// Zeroes momentum at every masked-out position of `model`.
    pub fn zero_masked(&mut self, model: &Model<T>) {
        for (p, v) in model.params.iter().zip(&mut self.velocity) {
            if let Some(mask) = &p.mask {
                let v = v.data_mut();
                for i in mask.zeros_iter() {
                    v[i] = T::zero();
                }
            }
        }
    }
}

/// `g' = g + wd·w; v ← μ·v + g'; w ← w − lr·v`, then masks are re-applied
/// to both weights and momentum.
pub fn sgd_step<T: Real>(model: &mut Model<T>, state: &mut OptimizerState<T>, lr: f64, momentum: f64, weight_decay: f64) -> Result<()> {
    if state.velocity.len() != model.params.len() {
        return Err(Error::LengthMismatch(model.params.len(), state.velocity.len()));
    }
    let (lr_t, mu, wd) = (T::lit(lr), T::lit(momentum), T::lit(weight_decay));
    for (p, v) in model.params.iter_mut().zip(&mut state.velocity) {
        if p.grad.shape() != p.value.shape() || v.shape() != p.value.shape() {
            return Err(Error::ShapeMismatch {
                op: "sgd_step",
                expected: p.value.shape().to_vec(),
                got: if v.shape() != p.value.shape() { v.shape() } else { p.grad.shape() }.to_vec(),
            });
        }
        for ((w, &g), m) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(v.data_mut()) {
            let g = g + wd * *w;
            *m = mu * *m + g;
            *w = *w - lr_t * *m;
        }
        if let Some(mask) = &p.mask {
            let (w, m) = (p.value.data_mut(), v.data_mut());
            for i in mask.zeros_iter() {
                w[i] = T::zero();
                m[i] = T::zero();
            }
        }
    }
    state.step += 1;
    state.lr = lr;
    Ok(())
}
