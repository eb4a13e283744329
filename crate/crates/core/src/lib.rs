//! Numerical verification of IDA-PBC designs for underactuated mechanical
//! systems in port-Hamiltonian form, including the integral-action variants
//! whose matching equations and ISS bounds do not hold in general.
//!
//! The crate evaluates matching residuals, dissipation bounds and
//! closed-loop trajectories on sampled states; it never proves anything
//! symbolically.

pub mod cli;
pub mod config;
pub mod diffops;
pub mod error;
pub mod expr;
pub mod idapbc;
pub mod models;
pub mod rebuttal;
pub mod sim;
pub mod sweep;
pub mod system;

pub use error::{Error, Result};
