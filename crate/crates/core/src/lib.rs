//! Numerical kernels for backward stochastic differential equations with
//! values in a Riemannian manifold chart.
//!
//! The library follows the constructive route: truncate the quadratic
//! Christoffel drift to a Lipschitz one, solve the associated quasilinear
//! parabolic system, assemble the solution pair along forward diffusion
//! paths, and certify by a gradient bound that the truncation never fired.
//! A verification layer checks the geometric estimates and submartingale
//! arguments this construction rests on, on desk-scale charts with
//! closed-form oracles.

pub mod bsde;
pub mod convexity;
pub mod dirichlet;
pub mod drift;
pub mod error;
pub mod forward;
pub mod geometry;
pub mod pdesolver;
pub mod regression;
pub mod verify;
pub mod ode;

pub use error::{Error, Result};
