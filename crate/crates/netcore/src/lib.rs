//! Dense reverse-mode differentiation for small fully connected models.
//!
//! A [`Graph`] records every primitive executed during a forward pass
//! together with the values its backward rule needs. Trainable tensors live
//! in a [`ParamStore`]; the graph borrows the store immutably, so parameters
//! cannot change while a record is alive. [`Graph::backward`] walks the record
//! in reverse and accumulates into a [`Gradients`] buffer, which an [`Adam`]
//! instance then consumes.

mod adam;
mod error;
mod gemm;
pub mod gradcheck;
mod graph;
mod layers;
mod params;
mod tensor;

pub use adam::{Adam, AdamBank, AdamConfig};
pub use error::{NetError, Result};
pub use graph::{BackwardRule, Binary, Graph, Unary, Var};
pub use layers::{xavier_uniform, Dense, ResidualBlock};
pub use params::{Gradients, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
