//! Minimal dense-tensor math with reverse-mode differentiation and an Adam
//! optimizer. Every gradient the trainer applies flows through [`Graph`] and
//! is verifiable against [`finite_diff_check`].

mod adam;
mod check;
mod graph;
mod params;
mod tensor;

pub use adam::{adam_step, AdamConfig, OptimState};
pub use check::finite_diff_check;
pub use graph::{Axis, Graph, NodeId};
pub(crate) use graph::gelu;
pub use params::{Gradients, Param, ParamSet};
pub use tensor::Tensor;
