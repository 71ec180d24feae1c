//! Minimal dense tensors with reverse-mode differentiation.
//!
//! Values are plain [`Tensor`]s; a [`Tape`] records ops define-by-run and
//! replays them backwards. All arithmetic is single-threaded f32, so repeated
//! runs on identical inputs are bitwise reproducible.

mod error;
mod gradcheck;
pub mod io;
mod ops;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheck};
pub use ops::conv2d_output_extent;
pub use tape::{BackwardCtx, Gradients, Tape, Var};
pub use tensor::Tensor;

/// Relative tolerance used throughout for f32 finite-difference checks.
pub const GRAD_CHECK_TOL: f64 = 5e-3;
/// Central-difference step for f32 inputs.
pub const GRAD_CHECK_EPS: f32 = 1e-3;
