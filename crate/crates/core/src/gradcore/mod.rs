//! Dense matrices with a tape-based reverse-mode differentiation engine.

pub mod check;
mod graph;
mod matrix;

pub use graph::{Graph, Var};
pub use matrix::RealMatrix;
