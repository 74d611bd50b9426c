//! Minimal CPU tensor engine with reverse-mode autodiff, sized for the small
//! convolutional networks in this crate.

mod graph;
mod layers;
mod optim;
mod params;
mod tensor;

pub use graph::{Conv2dSpec, Grads, Graph, Var};
pub use layers::{Conv2d, GroupNorm, Linear};
pub use optim::Adam;
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
