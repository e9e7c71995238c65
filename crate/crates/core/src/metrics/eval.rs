//! Clean, white-box and transfer accuracy.

use rand::Rng;

use crate::attacks::{perturb, pgd_attack, AttackConfig};
use crate::autodiff::per_example_cross_entropy;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::real::Real;

/// Accuracy and mean cross-entropy over a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EvalResult {
    pub accuracy: f64,
    pub loss: f64,
    pub samples: usize,
}

/// Accuracy of `model` on `data`, on adversarial inputs when an attack is
/// given. Batch-norm uses running statistics.
pub fn evaluate_accuracy<T: Real, R: Rng + ?Sized>(
    model: &Model<T>,
    data: &Dataset,
    attack: Option<&AttackConfig>,
    batch_size: usize,
    rng: &mut R,
) -> Result<EvalResult> {
    transfer_eval(model, model, data, attack, batch_size, rng)
}

/// Perturbations crafted against `source`, accuracy measured on `target`.
pub fn transfer_eval<T: Real, R: Rng + ?Sized>(
    source: &Model<T>,
    target: &Model<T>,
    data: &Dataset,
    attack: Option<&AttackConfig>,
    batch_size: usize,
    rng: &mut R,
) -> Result<EvalResult> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation dataset"));
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    if source.spec.input_shape != target.spec.input_shape || source.spec.classes != target.spec.classes {
        return Err(Error::ShapeMismatch {
            op: "transfer_eval",
            expected: [source.spec.input_shape.clone(), vec![source.spec.classes]].concat(),
            got: [target.spec.input_shape.clone(), vec![target.spec.classes]].concat(),
        });
    }
    let mut correct = 0usize;
    let mut loss_sum = 0.0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size) {
        let (x, y) = data.batch::<T>(chunk);
        let input = match attack {
            Some(cfg) => perturb(&x, &pgd_attack(source, &x, &y, cfg, rng)?),
            None => x,
        };
        let logits = target.logits(&input)?;
        let classes = logits.item_len();
        for (row, &label) in logits.data().chunks(classes).zip(&y) {
            if argmax(row) == label {
                correct += 1;
            }
        }
        loss_sum += per_example_cross_entropy(&logits, &y)?.iter().map(|l| l.as_f64()).sum::<f64>();
    }
    Ok(EvalResult {
        accuracy: correct as f64 / data.len() as f64,
        loss: loss_sum / data.len() as f64,
        samples: data.len(),
    })
}

/// Index of the largest entry, earliest on ties.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
