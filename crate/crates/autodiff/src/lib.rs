//! Minimal dense-tensor engine with reverse-mode gradients.
//!
//! Values live in [`Tensor`]s; a [`Tape`] records every operation executed on
//! [`Var`] handles and replays them backwards in [`Tape::backward`]. The op set
//! is intentionally narrow: matrix products, trailing-dimension broadcasting
//! arithmetic, row gathers, segment reductions for message passing, a valid
//! 2D cross-correlation, pointwise activations, dropout and a clipped binary
//! cross entropy.
//!
//! The element type is `f64` unless the `f32` feature is enabled.

mod rng;
mod tape;
mod tensor;

pub mod gradcheck;

pub use rng::{splitmix64, DropoutKey};
pub use tape::{Tape, Var};
pub use tensor::{Tensor, TensorError};

#[cfg(not(feature = "f32"))]
pub type Real = f64;
#[cfg(feature = "f32")]
pub type Real = f32;

/// Lower clipping bound applied to probabilities before taking logs.
pub const PROB_CLIP: Real = 1e-7;
