//! Tensor math, reverse-mode differentiation, parameter storage, and
//! checkpoint persistence.

pub mod checkpoint;
pub mod graph;
pub mod nn;
pub mod params;
pub mod tensor;

pub use graph::{Gradients, Graph, NodeId};
pub use params::{AdamConfig, ParamStore};
pub use tensor::{matmul, Tensor};
