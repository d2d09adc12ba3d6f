//! Gradient-flow training of deep linear and homogeneous networks, their
//! neural tangent kernels, and the closed-form theory those kernels follow
//! when training starts from small initialization.

pub mod dataset;
pub mod error;
pub mod generalization;
pub mod io;
pub mod kernel;
pub mod linalg;
pub mod network;
pub mod theory;
pub mod trainer;

pub use error::{Error, Result};
