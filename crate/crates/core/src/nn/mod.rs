//! Minimal tensor and reverse-mode autograd layer used by the models.

mod graph;
pub(crate) mod kernels;
mod params;
mod tensor;

pub use graph::{BatchStats, Graph, Var, BN_EPS};
pub use params::{Adam, AdamConfig, Bound, ParamKind, ParamStore};
pub use tensor::Tensor;
