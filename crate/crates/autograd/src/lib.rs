//! A small tape-based reverse-mode automatic differentiation engine.
//!
//! Values are dynamic-rank [`ndarray`] arrays, generic over `f32` and `f64`
//! through the [`Real`] trait. A [`Graph`] records every operation eagerly;
//! [`Graph::backward`] walks the tape in reverse and returns [`Gradients`]
//! for every parameter bound from a [`ParamStore`] and every variable leaf.
//!
//! All kernels are single-threaded and iterate in a fixed order, so a given
//! sequence of operations is bit-reproducible.

mod conv;
mod error;
mod graph;
mod params;
mod real;

pub use conv::{Conv2dSpec, ConvTranspose2dSpec};
pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use params::{ParamId, ParamStore};
pub use real::{cst, Real};

pub use ndarray::ArrayD;
