//! Optimal release schedules for Wolbachia population replacement.
//!
//! The crate covers three nested descriptions of the same dynamics:
//!
//! * [`model`]: the two-population competitive system for wild and
//!   infected mosquitoes, its steady states and their stability;
//! * [`slowfast`]: the same system with birth rates scaled by `1/eps`,
//!   written in total-deficit / infected-frequency variables;
//! * [`reduced`]: the scalar bistable equation `p' = f(p) + u g(p)` obtained
//!   as `eps -> 0`, together with the closed-form optimal release.
//!
//! [`adjoint`] provides gradients and switching-function diagnostics,
//! [`optimizer`] solves the discretized problems by projected gradient, and
//! [`harness`] drives the batch experiments behind the `wolbachia` binary.

pub mod adjoint;
pub mod error;
pub mod harness;
pub mod integrator;
mod linalg;
pub mod model;
pub mod optimizer;
pub mod output;
pub mod quadrature;
pub mod reduced;
pub mod slowfast;

pub use error::{Error, Result};
