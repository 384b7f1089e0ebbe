//! A compact f64 autodiff engine.
//!
//! Values are [`Tensor`]s; differentiable computations are [`Var`] graphs.
//! Backward rules are expressed as graph ops, so second derivatives work.

pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod tensor;
pub mod var;

pub use nn::{Bound, Conv2d, Embedding, Linear, ParamId, ParamStore};
pub use optim::Adam;
pub use tensor::{ConvGeom, Tensor};
pub use var::{grad, Var};
