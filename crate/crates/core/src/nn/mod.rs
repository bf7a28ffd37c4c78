//! Minimal dense-tensor and reverse-mode autodiff substrate.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod params;
pub mod tensor;

pub use graph::{Graph, Var};
pub use params::{Adam, AdamConfig, ParamId, ParamStore};
pub use tensor::Tensor;
