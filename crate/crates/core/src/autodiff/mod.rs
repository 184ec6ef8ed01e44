//! Tape-based reverse-mode differentiation over dense `f64` matrices.

mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::grad_check;
pub use graph::{Graph, Var};
pub use params::{Adam, ParamId, ParamStore, Snapshot};
pub use tensor::Tensor;

pub(crate) use graph::sigmoid;
