//! Optimizer, learning-rate schedules, and the training procedures: plain
//! and adversarial epochs, early ticket drawing with rewinding, and dynamic
//! prune/grow sparse training.

mod epoch;
mod flying_bird;
mod optim;
mod robust_bird;
mod schedule;
mod trainer;

pub use epoch::{
    iterations_per_epoch, train_adversarial_epoch, train_epoch, train_standard_epoch, EpochConfig, EpochStats,
    IterationHook, Regime, StepInfo,
};
pub use flying_bird::{
    cosine_update_ratio, fb_plus_adapt, fb_plus_triggers, fb_topology_update, increasing_frequency, update_counts,
    FbConfig, TopologyUpdate, TrendQueues,
};
pub use optim::{sgd_step, OptimizerState};
pub use robust_bird::{draw_epoch, find_robust_bird, rewind, DrawDetector, RbConfig, RbOutcome};
pub use schedule::LrSchedule;
pub use trainer::{
    allocate, evaluate_record, random_sparse_mask, run_flying_bird, IterationEvent, Splits, Topology, TrainConfig,
    Trainer,
};
