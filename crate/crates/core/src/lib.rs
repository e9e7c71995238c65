//! Sparse adversarial training engine.
//!
//! A small reverse-mode autodiff engine over convolutional classifiers with
//! per-weight binary masks, PGD / FGSM attacks, layer-wise density
//! allocators, magnitude/gradient prune-and-grow kernels, and the training
//! procedures built on them: dense PGD adversarial training, static sparse
//! tickets drawn early from mask-distance convergence (Robust Bird), and
//! dynamic prune/grow sparse training with optional adaptive ratios (Flying
//! Bird / Flying Bird+).

pub mod attacks;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod models;
pub mod real;
pub mod rng;
pub mod sparsity;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{Mode, Model, Parameter};
pub use real::Real;
pub use tensor::Tensor;
