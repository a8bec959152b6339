//! Minimal reverse-mode differentiable kernels, an optimizer and
//! parameter persistence.

pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod optim;
pub mod params;
pub mod tensor;

pub use graph::{Graph, NodeId};
pub use kernels::{ConvSpec, ConvTSpec, StftSpec};
pub use optim::{Adam, AdamConfig};
pub use params::{ModelBundle, ParamSet};
pub use tensor::{Real, Tensor};
