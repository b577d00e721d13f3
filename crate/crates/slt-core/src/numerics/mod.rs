//! Tensors, automatic differentiation, and parameter management.

pub mod gradcheck;
pub mod graph;
pub mod init;
pub mod param;
pub mod scalar;
pub mod tensor;

pub use gradcheck::{finite_difference_check, GradCheck};
pub use graph::{Graph, Var};
pub use param::{ParamStore, Parameter};
pub use scalar::Scalar;
pub use tensor::Tensor;
