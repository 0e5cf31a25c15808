//! Dense arrays with reverse-mode differentiation.
//!
//! Everything numerical in the crate is composed from the primitives on
//! [`Graph`]. A graph is generic over its element type: `f64` graphs back the
//! gradient checks, `f32` graphs back training.

mod array;
mod check;
mod graph;
mod optim;
mod params;
pub mod snapshot;

pub use array::{Array, Element};
pub use check::{
    grad_check, grad_check_fn, grad_check_report, primitive_cases, GradCheckReport, OpKind,
    DEFAULT_EPS,
};
pub use graph::{Graph, Var};
pub use optim::SgdMomentum;
pub use params::{Gradients, ParamId, ParamStore};
