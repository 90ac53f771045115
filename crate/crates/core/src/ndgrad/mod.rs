//! Dense `f64` tensors with define-by-run reverse-mode differentiation.

mod check;
mod graph;
mod tensor;

pub use check::{grad_check, grad_check_probed, rel_err, GradCheckReport, ParamCheck};
pub use graph::{leaky_relu, sigmoid, softplus, Graph, Var};
pub use tensor::Tensor;

pub(crate) use tensor::matmul_nt_raw;
