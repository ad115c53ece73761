//! Minimal reverse-mode automatic differentiation over dense `f64`
//! matrices, plus the recurrent cell and optimizer built on top of it.
//!
//! The engine is a dynamic tape: operations evaluate eagerly and record
//! themselves; [`Graph::backward`] replays the tape in reverse, accumulating
//! gradients for every parameter tensor it touched. Correctness is gated by
//! central finite differences in the op tests rather than by construction.

mod adam;
mod graph;
mod gru;
mod tensor;

pub use adam::{clip_global_norm, Adam, AdamConfig};
pub use graph::{Graph, NodeId, ParamId, ParamSet, MASK_VALUE};
pub use gru::{bigru_run, gru_step, GruParams};
pub use tensor::Tensor;

#[cfg(test)]
pub(crate) use graph::testutil;
