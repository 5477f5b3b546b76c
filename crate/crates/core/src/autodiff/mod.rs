//! Reverse-mode automatic differentiation over dense tensors.

pub mod check;
mod graph;
pub mod nn;
pub mod optim;
mod params;

pub(crate) use graph::{bce_logit, cosine_forward, sigmoid, softmax_in_place};
pub use graph::{ConvGeom, Gradients, Graph, Var};
pub use params::{Init, ParamId, ParamStore};
