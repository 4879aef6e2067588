//! Dense tensors and reverse-mode differentiation.
//!
//! [`Tensor`] is a plain value (shape + row-major data). Differentiable
//! computation happens on a [`Graph`], a tape of op nodes addressed by
//! [`Var`] handles. Nodes are appended in execution order, so the tape is
//! already topologically sorted and [`Graph::backward`] walks it in reverse.

mod graph;
pub mod kernels;
mod scalar;
mod value;

pub use graph::{BatchNormConfig, BatchStats, Graph, Mode, RunningStats, Var};
pub use scalar::Scalar;
pub use value::Tensor;
