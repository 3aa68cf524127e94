//! Minimal reverse-mode autodiff over `ndarray`, sized for desk-scale models.
//!
//! Everything runs in f64 on a per-step tape: parameters are bound as leading
//! leaf nodes, the forward pass appends operation nodes, and `backward` walks
//! the tape once. All kernels are single-threaded and deterministic.

pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod tape;

pub use optim::Adam;
pub use tape::{Grads, Padding, ParamId, ParamSet, Tape, TapeBinding, Tensor, Var};
