//! Model descriptions, width scaling and per-layer cost accounting.

mod cost;
mod scale;
mod spec;

pub use cost::{
    forward_flops, layer_costs, layer_flops, layer_params, prunable_params, total_params,
    weight_layers, Fan, LayerCost, WeightLayer,
};
pub use scale::{scale_width, scale_width_to_params, scale_width_to_params_with, scaled_width, WidthScope};
pub use spec::{LayerKind, ModelSpec};
