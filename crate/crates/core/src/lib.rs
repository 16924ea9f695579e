//! Planar Coulomb crystals of trapped ions and conditional phase gates driven
//! through their axial phonon modes.
//!
//! The crate is organised bottom-up:
//!
//! - [`crystal`]: equilibrium positions of `N` ions in an oblate harmonic trap.
//! - [`fit`]: log-log power-law regression used for the scaling laws.
//! - [`modes`]: harmonic coupling matrices, the axial spectrum and the planar
//!   stability threshold.
//! - [`dynamics`]: residual displacements, the entangling phase and the thermal
//!   gate fidelity of a segmented spin-dependent force.
//! - [`optimizer`]: amplitude and detuning search for a target ion pair.
//! - [`fock`]: brute-force truncated number-state evolution used to validate
//!   [`dynamics`].
//! - [`cli`]: configuration, caching and table emission for the `gatelab`
//!   binary.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod constants;
pub mod crystal;
pub mod dynamics;
mod error;
pub mod fit;
pub mod fock;
pub mod integrals;
pub mod modes;
pub mod optimizer;

pub use error::{Error, Result};
