//! Minimal differentiable-network engine: NCHW tensors on a reverse-mode
//! tape, 2D convolution, pooling/upsampling, activations, the combined
//! MSE + soft-Dice training loss, Adam, and a finite-difference gradient
//! checker.
//!
//! Training runs in `f32`; the gradient checker instantiates the same ops
//! at `f64`. All parallel inner loops assign each output element to exactly
//! one task and reduce partial results in a fixed order, so results are
//! bit-identical regardless of thread count.

mod adam;
mod gradcheck;
mod loss;
mod tape;

pub use adam::{adam_step, AdamState};
pub use gradcheck::{grad_check, GradCheckReport};
pub use loss::{combined_loss, LossBreakdown, DICE_EPSILON};
pub use tape::{Element, Tape, Tensor4, TensorId};
