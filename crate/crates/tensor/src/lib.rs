//! Dense `f64` tensors with tape-based reverse-mode differentiation, seeded
//! parameter storage, checkpoints, and a finite-difference gradient checker.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod param;
pub mod tensor;

pub use error::{Result, TensorError};
pub use graph::{BinaryKind, CustomOp, Elementwise, Gradients, Graph, UnaryKind, Var};
pub use optim::Adam;
pub use param::{Init, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
