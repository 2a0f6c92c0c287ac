//! Continuous waves (relative equilibria) and modulated waves (relative
//! periodic solutions) of S1-equivariant delay differential equations.
//!
//! The library solves the algebraic and periodic boundary-value problems
//! defining both solution types, continues the primary CW set over the
//! effective feedback phase, applies the delay/phase reappearance rules,
//! counts coexisting solutions, and classifies stability through
//! characteristic roots, Floquet multipliers and the large-delay strong and
//! continuous spectra. A method-of-steps integrator serves as the
//! independent cross-check for everything else.

pub mod cli;
pub mod cw;
pub mod cw_spectrum;
pub mod error;
pub mod linalg;
pub mod model;
pub mod mw;
pub mod mw_spectrum;
pub mod sim;
pub mod trig;

pub use error::{EqwaveError, Result};
pub use model::{EquivariantModel, GroupGenerator, ModelConfig, ModelJacobians, ModelRegistry};
