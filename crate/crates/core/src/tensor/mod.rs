//! Dense `f64` tensors with tape-based reverse-mode differentiation.
//!
//! Layers are written against [`Graph`]: parameters and inputs enter as leaf
//! nodes, each primitive records how to route gradients back to its inputs,
//! and [`Graph::backward`] fills gradient buffers in one reverse sweep.
//! [`grad_check`] provides the finite-difference oracle the primitives are
//! tested against.

mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod params;
mod value;

pub use gradcheck::{central_difference, grad_check, relative_error, REL_ERROR_FLOOR};
pub use graph::{Graph, Var};
pub use params::{BoundParams, ParamId, ParamStore, PARAMS_MAGIC_LINE};
pub use value::Tensor;
