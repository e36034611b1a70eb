//! Minimal reverse-mode automatic differentiation over dense f64 arrays.
//!
//! A [`Graph`] is an append-only list of primitive ops built define-by-run;
//! parents always precede children, so forward evaluation is a single pass
//! and the backward pass is the reverse walk. Graphs are cheap and are
//! rebuilt for every training step.
//!
//! The primitive set is deliberately small: elementwise arithmetic with
//! size-1-axis broadcasting, 2-D matrix multiply, a handful of nonlinearities,
//! axis reductions, log-sum-exp, concatenation, index selection, and constant
//! affine maps. Anything else (clamps, norms, losses) is composed from these,
//! which keeps the finite-difference oracle authoritative for every graph the
//! crate builds.

mod check;
mod graph;
mod tensor;

pub use check::finite_diff_check;
pub use graph::{Bindings, Gradients, Graph, NodeId, Op, Values};
pub use tensor::Tensor;
