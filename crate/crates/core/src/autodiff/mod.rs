//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records every operation as it is evaluated. Parameters live
//! in a [`ParamStore`] the graph borrows read-only, so large tables are never
//! copied onto the tape. [`Graph::backward`] replays the tape in reverse and
//! returns [`Gradients`], which the caller folds into the store.
//!
//! All kernels run single-threaded with a fixed reduction order, so two runs
//! over the same graph produce bit-identical gradients.

mod conv;
pub mod gradcheck;
mod graph;
mod ops;
mod tensor;

pub use conv::ConvGeom;
pub use graph::{Gradients, Graph, ScatterPlan, Var};
pub use ops::{sigmoid, swish};
pub use tensor::{numel, ParamId, ParamStore, Real, Tensor};
