//! Per-epoch metrics rows and checkpoint selection.

use crate::error::{Error, Result};

/// One row of the per-epoch metrics table.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Robust accuracy on the fixed training subset.
    pub train_ra: f64,
    pub val_ra: f64,
    pub test_ra: f64,
    pub test_sa: f64,
    pub val_robust_loss: f64,
    pub sparsity: f64,
    pub active_params: usize,
    pub cum_train_flops: f64,
    pub wall_time_s: f64,
}

pub const CSV_HEADER: &str =
    "epoch,lr,train_ra,val_ra,test_ra,test_sa,val_robust_loss,sparsity,active_params,cum_train_flops,wall_time_s";

impl MetricsRecord {
    /// CSV row matching [`CSV_HEADER`]. Floats use Rust's shortest
    /// round-trip formatting, which is locale independent.
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.lr,
            self.train_ra,
            self.val_ra,
            self.test_ra,
            self.test_sa,
            self.val_robust_loss,
            self.sparsity,
            self.active_params,
            self.cum_train_flops,
            self.wall_time_s
        )
    }

    pub fn from_csv_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 11 {
            return Err(Error::InvalidArgument(format!("metrics row has {} fields, expected 11", f.len())));
        }
        let num = |i: usize| -> Result<f64> {
            f[i].parse::<f64>()
                .map_err(|_| Error::InvalidArgument(format!("bad number {:?} in metrics row", f[i])))
        };
        let int = |i: usize| -> Result<usize> {
            f[i].parse::<usize>()
                .map_err(|_| Error::InvalidArgument(format!("bad integer {:?} in metrics row", f[i])))
        };
        Ok(Self {
            epoch: int(0)?,
            lr: num(1)?,
            train_ra: num(2)?,
            val_ra: num(3)?,
            test_ra: num(4)?,
            test_sa: num(5)?,
            val_robust_loss: num(6)?,
            sparsity: num(7)?,
            active_params: int(8)?,
            cum_train_flops: num(9)?,
            wall_time_s: num(10)?,
        })
    }
}

/// Train RA minus test RA; negative when the model does better on test.
pub fn robust_generalization_gap(train_ra: f64, test_ra: f64) -> f64 {
    train_ra - test_ra
}

/// Best (highest validation RA, earliest on ties) and final entries of a
/// run, plus the drop in test RA from best to final.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckpointChoice {
    /// Index into the history.
    pub best: usize,
    pub last: usize,
    /// Best-checkpoint test RA minus final-checkpoint test RA.
    pub diff: f64,
}

pub fn select_checkpoints(history: &[MetricsRecord]) -> Result<CheckpointChoice> {
    if history.is_empty() {
        return Err(Error::Empty("metrics history"));
    }
    let mut best = 0;
    for (i, r) in history.iter().enumerate() {
        if r.val_ra > history[best].val_ra {
            best = i;
        }
    }
    let last = history.len() - 1;
    Ok(CheckpointChoice {
        best,
        last,
        diff: history[best].test_ra - history[last].test_ra,
    })
}

/// Accuracy fraction as a percentage with two decimals, e.g. `51.10`.
pub fn format_percent(fraction: f64) -> String {
    format!("{:.2}", fraction * 100.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(val_ra: f64, test_ra: f64) -> MetricsRecord {
        MetricsRecord {
            val_ra,
            test_ra,
            ..Default::default()
        }
    }

    #[test]
    fn gap_examples() {
        assert!((robust_generalization_gap(0.8992, 0.5110) - 0.3882).abs() < 1e-12);
        assert_eq!(robust_generalization_gap(0.3, 0.3), 0.0);
        assert!((robust_generalization_gap(0.5, 0.6) + 0.1).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_examples() {
        let h = [rec(0.40, 0.0), rec(0.51, 0.0), rec(0.49, 0.0)];
        assert_eq!(select_checkpoints(&h).unwrap().best, 1);
        let h = [rec(0.1, 0.2), rec(0.2, 0.3), rec(0.3, 0.35)];
        let c = select_checkpoints(&h).unwrap();
        assert_eq!((c.best, c.last, c.diff), (2, 2, 0.0));
        let h = [rec(0.5, 0.5110), rec(0.4, 0.4361)];
        assert_eq!(format_percent(select_checkpoints(&h).unwrap().diff), "7.49");
        let h = [rec(0.5, 0.1), rec(0.5, 0.2)];
        assert_eq!(select_checkpoints(&h).unwrap().best, 0);
        assert!(select_checkpoints(&[]).is_err());
    }

    #[test]
    fn csv_roundtrip() {
        let r = MetricsRecord {
            epoch: 3,
            lr: 0.1,
            train_ra: 0.25,
            val_ra: 1.0 / 3.0,
            test_ra: 0.5,
            test_sa: 0.75,
            val_robust_loss: 1.2345678901234567,
            sparsity: 0.8,
            active_params: 123,
            cum_train_flops: 3.3e12,
            wall_time_s: 0.0,
        };
        assert_eq!(MetricsRecord::from_csv_row(&r.to_csv_row()).unwrap(), r);
        assert_eq!(CSV_HEADER.split(',').count(), 11);
    }
}
