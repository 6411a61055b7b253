//! Dense arrays, reverse-mode differentiation, AdamW, finite-difference
//! checking and the checkpoint container.

mod array;
pub mod checkpoint;
mod gradcheck;
mod graph;
mod optim;
mod params;

pub use array::Array;
pub use gradcheck::{grad_check, BlockReport, GradCheckOptions, GradCheckReport};
pub use graph::{softmax, Gradients, Graph, Var};
pub use optim::{AdamW, AdamWConfig};
pub use params::{glorot, uniform_vector, ParamStore};
