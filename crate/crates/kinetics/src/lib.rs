//! Deterministic kinetic solver for the spatially homogeneous Boltzmann
//! equation with a shear deformation force, under the homoenergetic
//! self-similar scaling.
//!
//! The crate provides, at desk scale:
//! - a truncated velocity lattice with midpoint quadrature (`grid`),
//! - the cutoff hard-potential collision operator and its frequency
//!   (`collision`),
//! - the assembled linearized operator L = nu - K with projections, a
//!   constrained inverse and the explicit kernel bounds (`linearized`),
//! - the second-order expansion profiles and heating constants
//!   (`expansion`),
//! - coupled time integration of the scaled system with exact
//!   characteristic transport, plus the unscaled equation (`dynamics`),
//! - large-velocity smallness measurements of the cutoff kernel operator
//!   and rate-fitting utilities (`estimates`).

pub mod collision;
pub mod dynamics;
pub mod error;
pub mod estimates;
pub mod expansion;
pub mod grid;
pub mod linearized;

pub use error::{KineticsError, Result};
