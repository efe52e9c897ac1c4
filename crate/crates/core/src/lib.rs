//! QBD-RAP approximation of bounded stochastic fluid queues.
//!
//! [`medist`] builds matrix exponential distributions and the residual-time
//! basis, [`fluidq`] holds the fluid model, its generator and a path
//! simulator, [`qbdrap`] assembles and solves the approximating QBD-RAP and
//! reconstructs densities, and [`verify`] measures how well it matches the
//! fluid queue. [`config`] and [`cli`] drive it all from a JSON file.

// `!(x > 0.0)` rejects NaN along with the out-of-range values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod error;
pub mod fluidq;
pub mod linalg;
pub mod medist;
pub mod qbdrap;
pub mod quad;
pub mod verify;

pub use error::{Error, Result};
