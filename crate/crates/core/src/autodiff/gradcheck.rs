//! Central-difference gradient check used as a test oracle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::BackwardOptions;
use crate::error::Result;
use crate::model::{Mode, Model};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates sampled per parameter tensor (and from the input).
    pub samples_per_tensor: usize,
    pub mode: Mode,
    pub check_input: bool,
    pub seed: u64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    /// Multiplies the analytic gradient before comparison; 1.0 except for
    /// fault-injection tests.
    pub gradient_scale: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            samples_per_tensor: 8,
            mode: Mode::Train,
            check_input: true,
            seed: 0,
            floor: 1e-6,
            gradient_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Name of the tensor holding the worst coordinate.
    pub worst: String,
    pub checked: usize,
    pub passed: bool,
}

fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Compares analytic cross-entropy gradients against central differences on
/// a random sample of parameter (and input) coordinates.
pub fn grad_check(model: &Model<f64>, x: &Tensor<f64>, labels: &[usize], cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let loss_at = |m: &Model<f64>, input: &Tensor<f64>| -> Result<f64> {
        let (mut tape, _) = m.record(input, cfg.mode)?;
        tape.cross_entropy(labels)
    };

    let mut analytic = model.clone();
    let (mut tape, _) = analytic.record(x, cfg.mode)?;
    tape.cross_entropy(labels)?;
    let dx = tape
        .backward(&mut analytic, BackwardOptions { input_grad: true, dense: false })?
        .expect("input grad");

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut worst = (0.0f64, String::new());
    let mut checked = 0;
    let h = cfg.step;
    let mut probe = model.clone();
    for p in 0..model.params.len() {
        let len = model.params[p].value.len();
        for _ in 0..cfg.samples_per_tensor.min(len) {
            let i = rng.gen_range(0..len);
            let orig = probe.params[p].value.data()[i];
            probe.params[p].value.data_mut()[i] = orig + h;
            let up = loss_at(&probe, x)?;
            probe.params[p].value.data_mut()[i] = orig - h;
            let down = loss_at(&probe, x)?;
            probe.params[p].value.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.params[p].grad.data()[i] * cfg.gradient_scale;
            let e = relative_error(a, numeric, cfg.floor);
            checked += 1;
            if e > worst.0 {
                worst = (e, model.params[p].name.clone());
            }
        }
    }
    if cfg.check_input {
        let mut xin = x.clone();
        for _ in 0..cfg.samples_per_tensor.min(x.len()) {
            let i = rng.gen_range(0..x.len());
            let orig = xin.data()[i];
            xin.data_mut()[i] = orig + h;
            let up = loss_at(model, &xin)?;
            xin.data_mut()[i] = orig - h;
            let down = loss_at(model, &xin)?;
            xin.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let e = relative_error(dx.data()[i] * cfg.gradient_scale, numeric, cfg.floor);
            checked += 1;
            if e > worst.0 {
                worst = (e, "input".into());
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst.0,
        worst: worst.1,
        checked,
        passed: worst.0 < cfg.tolerance,
    })
}

/// Convenience wrapper matching the generic element type of the caller.
pub fn grad_check_real<T: Real>(model: &Model<T>, x: &Tensor<T>, labels: &[usize], cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    grad_check(&model.cast::<f64>(), &x.cast::<f64>(), labels, cfg)
}
