//! Numerical toolkit for fully coupled forward-backward doubly stochastic
//! differential equations driven by two Brownian motions and a Poisson
//! random measure.
//!
//! The crate is organised bottom-up:
//!
//! - [`randomness`]: time grids, mark spaces and reproducible driving noise.
//! - [`calculus`]: discrete forward/backward Itô sums, compensated jump
//!   integrals, the exact discrete energy identity and the integro-differential
//!   generator.
//! - [`coeffs`]: coefficient systems and empirical checks of the monotonicity
//!   and Lipschitz conditions.
//! - [`bdsdep`]: regression-based backward induction for the decoupled
//!   backward doubly stochastic equation with jumps.
//! - [`fbdsdep`]: the continuation (homotopy) solver for the coupled system.
//! - [`spdie`]: Feynman-Kac evaluation of quasilinear stochastic
//!   integro-PDEs and a finite-difference oracle.
//! - [`experiments`]: the parameter-continuity study and the quadratic
//!   Hamiltonian demo.
// `!(x > 0.0)` style guards are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]


pub mod bdsdep;
pub mod calculus;
pub mod coeffs;
pub mod error;
pub mod experiments;
pub mod fbdsdep;
pub mod paths;
pub mod randomness;
pub mod spdie;

pub use error::{DsdeError, Result};
