//! Learning-rate schedules.

#[derive(Debug, Clone, PartialEq)]
pub enum LrSchedule {
    /// `base · gamma^(milestones passed)`, evaluated per epoch (0-based).
    MultiStep { base: f64, milestones: Vec<usize>, gamma: f64 },
    /// Linear ramp from 0 to `max` over the first half of all iterations and
    /// back to 0 over the second half.
    Cyclic { max: f64 },
}

impl LrSchedule {
    pub fn multistep(base: f64, milestones: &[usize]) -> Self {
        LrSchedule::MultiStep {
            base,
            milestones: milestones.to_vec(),
            gamma: 0.1,
        }
    }

    /// Learning rate for `iteration` (0-based, global) in `epoch` (0-based).
    pub fn lr(&self, epoch: usize, iteration: u64, total_iterations: u64) -> f64 {
        match self {
            LrSchedule::MultiStep {
                base,
                milestones,
                gamma,
            } => {
                let passed = milestones.iter().filter(|&&m| epoch >= m).count();
                base * gamma.powi(passed as i32)
            }
            LrSchedule::Cyclic { max } => {
                if total_iterations == 0 {
                    return 0.0;
                }
                let (t, n) = (iteration.min(total_iterations), total_iterations);
                if 2 * t <= n {
                    max * (2 * t) as f64 / n as f64
                } else {
                    max * (2 * (n - t)) as f64 / n as f64
                }
            }
        }
    }
}
