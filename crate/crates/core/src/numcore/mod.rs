//! Differentiable dense-array computation: forward ops, reverse-mode
//! gradients, parameters, the optimizer and checkpoint persistence.

mod array;
pub mod checkpoint;
pub mod gradcheck;
mod graph;
pub mod nn;
mod optim;
mod params;

pub use array::DiffArray;
pub use graph::{CustomOp, Graph, Mask, Var};
pub use graph::{sigmoid, softplus};
pub use optim::{clip_grad_norm, round_state_f32, AdamW, OptimState};
pub use params::{round_f32, ParamId, ParamStore};

#[cfg(test)]
mod tests;
