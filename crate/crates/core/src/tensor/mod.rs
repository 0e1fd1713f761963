//! Dense `f64` arrays with tape-based reverse-mode differentiation.
//!
//! The op set is exactly what the floor-counting model needs: matrix
//! products, row/column broadcasting, activations, reductions, row
//! gather/scatter for message passing, segment softmax for neighbourhood
//! attention, and a fused graph normalization.

mod array;
mod gradcheck;
mod tape;

pub use array::Array;
pub use gradcheck::{finite_diff_check, GradCheck};
pub use tape::{scalar, Axis, Gradients, Tape, Var};
