//! Minimal dense-tensor arithmetic with reverse-mode automatic
//! differentiation, sufficient to train and introspect a small transformer.
//!
//! Tensors are plain row-major `Vec`s. Differentiable computation goes
//! through a [`Tape`]: every op records its inputs and [`Tape::backward`]
//! replays the recording in reverse. There is no operator fusion or graph
//! optimization; the point is that every intermediate value is inspectable.
//!
//! Training and inference run in `f32`; the gradient-check suite instantiates
//! the same code in `f64` (see [`Scalar`]).

mod gradcheck;
mod rng;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_subset};
pub use rng::Rng;
pub use tape::{NodeId, Tape};
pub use tensor::{NumError, Scalar, Tensor};
