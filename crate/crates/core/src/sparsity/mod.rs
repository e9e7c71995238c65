//! Binary weight masks, layer-wise density allocation and prune/grow kernels.

mod alloc;
mod mask;
mod select;

pub use alloc::{
    allocate_erk, allocate_igq, allocate_snip, allocate_uniform, sample_random_mask, AllocationPlan, Allocator,
};
pub use mask::{mask_distance, sparsity_of, LayerMask, SparsityMask};
pub use select::{
    global_magnitude_mask, global_top_k, grow_largest_gradient, kept_count, prune_lowest_magnitude, select_grow,
    select_prune,
};
