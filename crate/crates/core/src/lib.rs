//! Learning robot inverse dynamics with sparse variational deep kernel
//! regression, and using the learned predictive variance to schedule feedback
//! gains in a computed-torque controller. Ships with an analytic planar-arm
//! simulator that provides ground truth for training data and closed-loop
//! evaluation.

pub mod dataset;
pub mod error;
pub mod kernel;
pub mod mlp;
pub mod numeric;
pub mod svgp;

pub use error::{Error, Result};
