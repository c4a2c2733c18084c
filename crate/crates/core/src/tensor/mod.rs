//! Dense `f64` tensors with a reverse-mode tape.

mod gradcheck;
mod graph;
mod matrix;

pub use gradcheck::{finite_diff_check, GradCheckReport, DEFAULT_FD_EPS};
pub use graph::{Gradients, Graph, Tensor, DEGENERATE_ROW_NORM, NORM_EPS};
pub use matrix::Matrix;
