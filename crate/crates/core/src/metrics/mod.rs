//! Evaluation, checkpoint selection, FLOPs accounting and loss surfaces.

mod eval;
mod flops;
mod record;
mod surface;

pub use eval::{argmax, evaluate_accuracy, transfer_eval, EvalResult};
pub use flops::{iteration_flops, training_flops_total, FlopModel};
pub use record::{
    format_percent, robust_generalization_gap, select_checkpoints, CheckpointChoice, MetricsRecord, CSV_HEADER,
};
pub use surface::{
    displaced, filter_normalized_direction, grid_coordinates, loss_grid, loss_surface_grid, orthogonalize,
};
