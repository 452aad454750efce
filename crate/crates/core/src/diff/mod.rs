//! Reverse-mode differentiation over dense `f64` arrays.
//!
//! Gradients are built as tape nodes, which gives exact second-order
//! derivatives for the compositions the critic needs (affine, softplus,
//! tanh, norms).

mod array;
mod tape;

pub use array::Array;
pub use tape::{sigmoid, softplus, Tape, Var};
