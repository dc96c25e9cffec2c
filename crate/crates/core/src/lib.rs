//! Numerical laboratory for stochastic interacting particle systems started
//! from lattice (Chorin) initial data.
//!
//! The crate is organised bottom-up:
//!
//! * [`kernels`]: interaction kernels, the radial mollifier and the blob function.
//! * [`sampling`]: lattice initial data with density weights.
//! * [`noise`] and [`dynamics`]: counter-based Brownian increments and the
//!   Euler–Maruyama integrators for the interacting, regularized and
//!   self-consistent particle systems.
//! * [`fields`]: uniform grids, blob deposits, gradients and the
//!   `L∞(L²) ∩ L²(H¹)` error functional.
//! * [`pde`]: the mean-field drift-diffusion equation on a grid.
//! * [`experiments`]: convergence sweeps, separation statistics and the
//!   computable error-decomposition terms.
//! * [`io`]: binary frame formats and CSV exports.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dynamics;
pub mod error;
pub mod experiments;
pub mod fields;
pub mod io;
pub mod kernels;
pub mod noise;
pub mod pde;
pub mod quadrature;
pub mod sampling;
pub mod stats;

pub use error::{Error, Result};
