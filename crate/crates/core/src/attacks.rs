//! L∞ adversarial perturbations: multi-step PGD and single-step FGSM with
//! random start.
//!
//! Attacks run in the raw `[0, 1]` input space against the model's eval-mode
//! forward pass (batch-norm running statistics), so they never mutate the
//! model.

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackConfig {
    /// L∞ budget in input units.
    pub eps: f64,
    /// Step size in input units.
    pub alpha: f64,
    pub steps: usize,
    pub random_start: bool,
}

impl AttackConfig {
    pub fn pgd(eps: f64, alpha: f64, steps: usize) -> Self {
        Self {
            eps,
            alpha,
            steps,
            random_start: true,
        }
    }

    /// FGSM with random start and step `1.25 ε`.
    pub fn fgsm_rs(eps: f64) -> Self {
        Self {
            eps,
            alpha: 1.25 * eps,
            steps: 1,
            random_start: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(Error::InvalidArgument(format!("attack eps {} must be >= 0", self.eps)));
        }
        if !(self.alpha.is_finite() && (self.alpha > 0.0 || (self.eps == 0.0 && self.alpha == 0.0))) {
            return Err(Error::InvalidArgument(format!("attack alpha {} must be > 0", self.alpha)));
        }
        if self.steps == 0 {
            return Err(Error::InvalidArgument("attack steps must be >= 1".into()));
        }
        Ok(())
    }
}

/// Clamps `d` into `[-eps, eps] ∩ [-x, 1 - x]` such that both `|d| <= eps`
/// and `0 <= x + d <= 1` hold exactly in floating point.
#[inline]
pub fn project<T: Real>(x: T, d: T, eps: T) -> T {
    let lo = if -x > -eps { -x } else { -eps };
    let hi = {
        let room = T::one() - x;
        if room < eps { room } else { eps }
    };
    let mut d = if d < lo {
        lo
    } else if d > hi {
        hi
    } else {
        d
    };
    while x + d > T::one() {
        d = d.step_down();
    }
    while x + d < T::zero() {
        d = -((-d).step_down());
    }
    d
}

#[inline]
fn sign<T: Real>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn check_range<T: Real>(x: &Tensor<T>) -> Result<()> {
    if x.data().iter().all(|&v| v >= T::zero() && v <= T::one()) {
        Ok(())
    } else {
        Err(Error::InvalidArgument("attack input outside [0, 1]".into()))
    }
}

/// `x + δ`, elementwise.
pub fn perturb<T: Real>(x: &Tensor<T>, delta: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    out.add_assign(delta);
    out
}

/// Projected gradient ascent on the cross-entropy loss. Returns δ with
/// `‖δ‖∞ ≤ ε` and `x + δ ∈ [0, 1]`.
pub fn pgd_attack<T: Real, R: Rng + ?Sized>(
    model: &Model<T>,
    x: &Tensor<T>,
    labels: &[usize],
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    check_range(x)?;
    let mut delta = Tensor::zeros(x.shape());
    if cfg.eps == 0.0 {
        return Ok(delta);
    }
    let eps = T::lit(cfg.eps);
    let alpha = T::lit(cfg.alpha);
    if cfg.random_start {
        for (d, &xi) in delta.data_mut().iter_mut().zip(x.data()) {
            let u = T::lit(rng.gen_range(-cfg.eps..=cfg.eps));
            *d = project(xi, u, eps);
        }
    }
    for _ in 0..cfg.steps {
        let mut tape = model.forward_eval(&perturb(x, &delta))?;
        tape.cross_entropy(labels)?;
        let g = tape.input_gradient(model)?;
        g.ensure_finite("attack gradient")?;
        for ((d, &gi), &xi) in delta.data_mut().iter_mut().zip(g.data()).zip(x.data()) {
            *d = project(xi, *d + alpha * sign(gi), eps);
        }
    }
    Ok(delta)
}

/// One signed-gradient step of size `alpha` from a uniform random start.
pub fn fgsm_rs_attack<T: Real, R: Rng + ?Sized>(
    model: &Model<T>,
    x: &Tensor<T>,
    labels: &[usize],
    eps: f64,
    alpha: f64,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let cfg = AttackConfig {
        eps,
        alpha,
        steps: 1,
        random_start: true,
    };
    pgd_attack(model, x, labels, &cfg, rng)
}
