//! Reverse-mode differentiation over dense rank-2 tensors.

mod gradcheck;
mod graph;

pub use gradcheck::{check_gradients, check_graph, relative_error, RELATIVE_ERROR_FLOOR, GradReport};
pub use graph::{Gradients, Graph, Op, Var, NORMALIZE_EPS};
