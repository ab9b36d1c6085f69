//! Dense tensors, reverse-mode differentiation, AdamW and gradient verification.

pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod optim;
pub mod scalar;
pub mod tensor;

pub use gradcheck::{finite_diff_check, GradCheckOptions, GradCheckReport};
pub use graph::{AttnBlock, Graph, Var};
pub use optim::{adamw_step, clip_grad_norm, cosine_lr, AdamWConfig, OptimizerState};
pub use scalar::Scalar;
pub use tensor::Tensor;
