//! Reverse-mode automatic differentiation over [`Tensor`](crate::Tensor) values.

pub mod checkpoint;
pub mod gradcheck;
mod graph;
mod param;

pub use graph::{concat_cols, concat_rows, Graph, TraceEntry, Var};
pub use param::{Gradients, ParamId, ParamStore, Parameter};
