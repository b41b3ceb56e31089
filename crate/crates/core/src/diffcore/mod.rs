//! Dense matrices, a define-by-run reverse-mode graph, and gradient checking.

mod check;
mod graph;
mod params;
mod tensor;

pub use check::{finite_diff_check, GradCheckReport};
pub use graph::{Binary, DiffGraph, NodeId, Reduce, Unary};
pub use params::{Bound, MomentumSgd, ParamSet};
pub use tensor::Tensor2;
