//! Dense tensors, a define-by-run reverse-mode tape over a fixed op set, optimizers
//! and seeded randomness.

mod check;
mod graph;
mod optim;
mod rng;
mod tensor;

pub use check::finite_diff_check;
pub use graph::{CeTarget, Gradients, Graph, NodeId, ParamId, ParamSet, PoolKind};
pub use optim::{Optimizer, OptimizerKind};
pub use rng::RngStream;
pub use tensor::Tensor;
pub(crate) use tensor::{matmul, matmul_nt};
