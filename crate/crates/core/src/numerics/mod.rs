//! Dense `f64` tensors, a reverse-mode tape, neural layers and Adam.

pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_params, grad_check_params_multi, relative_error, ParamCheck};
pub use nn::{cosine_sim, degenerate_cosine_count};
pub use optim::{AdamHyper, CosineSchedule, OptimizerState};
pub use params::{ParamStore, Trainable};
pub use tape::{Diagnostics, Gradients, Tape, Var};
pub use tensor::Tensor;
