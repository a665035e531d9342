//! Batch diversity through repulsion in the contextual space of multimodal
//! attention transformers.
//!
//! - [`linalg`]: symmetric eigensolver and batch kernels
//! - [`vendi`]: Vendi score, von Neumann entropy and its gradient
//! - [`repulsion`]: the inner-loop update and its scheduling
//! - [`toydit`]: a small dual/single-stream attention stack with hooks
//! - [`steering`]: interpolation / extrapolation of internal representations
//! - [`gmmflow`]: closed-form rectified flow over a conditioned Gaussian mixture
//! - [`cli`]: command-line front end

pub mod cli;
pub mod error;
pub mod gmmflow;
pub mod linalg;
pub mod repulsion;
pub mod rng;
pub mod steering;
pub mod toydit;
pub mod vendi;

pub use error::{Error, Result};
