//! Minimal reverse-mode automatic differentiation.

mod array;
mod tape;

pub use array::Array;
pub use tape::{Gradients, Tape, Var};

