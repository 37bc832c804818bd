//! Multi-modal, multi-domain translation with a universal attention module
//! and a two-path cVAE-GAN objective, at desk scale.

pub mod attention;
pub mod cli;
pub mod datamodel;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod subnets;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
