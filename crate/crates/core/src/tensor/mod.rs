//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! [`Tensor`] is a plain value: shape plus row-major data. It carries no
//! graph state, so tensors can be shared freely across threads. Graphs are
//! built on a [`Tape`]: leaves are inserted with [`Tape::leaf`], operations
//! return [`Var`] handles, and [`Tape::backward`] fills gradients in reverse
//! tape order so every node is visited exactly once.

mod gradcheck;
mod tape;
mod value;

pub use gradcheck::{finite_difference_check, GradCheckReport};
pub use tape::{Tape, Var};
pub use value::Tensor;
