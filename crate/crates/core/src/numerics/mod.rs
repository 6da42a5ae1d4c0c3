//! Tensors, deterministic kernels, reverse-mode autodiff, optimizer, and
//! schedules. Everything here is generic over [`Real`] so the same graph can
//! run in f32 for training and f64 for finite-difference verification.

pub mod autograd;
pub mod gradcheck;
pub mod linalg;
pub mod ops;
pub mod optim;
pub mod schedule;
pub mod tensor;

pub use autograd::{gelu_tanh, GradStore, Tape, Var};
pub use gradcheck::{grad_check, op_suite, GradCheckConfig, GradCheckReport};
pub use ops::{cross_entropy, entropy, l2_normalize, mean_std, softmax_temp};
pub use optim::{adamw_step, clip_global_norm, AdamHyper, AdamState};
pub use schedule::{CosineSchedule, LinearRamp};
pub use tensor::{r, Real, Tensor};
