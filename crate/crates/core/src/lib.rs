//! Dynamic CRRA portfolio selection under distortion risk constraints.
//!
//! The pieces are layered bottom-up:
//!
//! * [`market`]: coefficients, grids and Brownian path simulation.
//! * [`risk`]: distortion risk of the projected wealth loss.
//! * [`constraint`]: the compiled feasible set and its projection.
//! * [`bsde`]: the quadratic BSDE driver and a regression Monte Carlo solver.
//! * [`portfolio`]: optimal strategies, the value function and diagnostics.

pub mod bsde;
pub mod constraint;
pub mod error;
pub mod market;
pub mod normal;
pub mod portfolio;
pub mod quadrature;
pub mod regression;
pub mod risk;

pub use error::{Error, Result};
