//! Quantum trajectories for a single damped optical mode.
//!
//! The crate covers the deterministic Lindblad evolution of the mode, its
//! stochastic unravelings (normalized and linear jump equations, and the
//! linear diffusive equation of the large local-oscillator limit), the
//! photocurrent functionals `R(t)`, `S(t)` that summarize a diffusive record,
//! the effects (POVM elements) of homodyne, heterodyne and general
//! finite-time detection, and adaptive phase measurements.
//!
//! Time is measured in units of the inverse decay rate of the mode.

pub mod adaptive;
pub mod detection;
pub mod dynamics;
pub mod error;
pub mod fock;
pub mod linalg;
pub mod random;
pub mod rng;
pub mod stats;
pub mod trajectories;

pub use error::{Error, Result};
pub use fock::{DensityMatrix, FockSpace, OperatorMatrix, StateVector, C64};
