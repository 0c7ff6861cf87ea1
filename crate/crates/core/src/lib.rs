//! Metriplectic conditional flow matching.
//!
//! Learned vector fields of the form `v = J∇H − G∇Φ` (skew `J`, positive
//! semidefinite `G`) are trained by conditional flow matching on one-step
//! transitions and rolled out with a Strang splitting of symplectic
//! half-steps around a proximal dissipative step. The crate also carries the
//! damped-pendulum testbed used to check conservation, dissipation and
//! distributional fit.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod bench;
pub mod cfm;
pub mod error;
pub mod fields;
pub mod integrate;
pub mod physics;
pub mod registry;

pub use error::{Error, Result};
