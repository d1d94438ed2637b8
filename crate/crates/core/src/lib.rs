//! Numerical laboratory for nonautonomous parabolic evolution families.
//!
//! The crate builds the two-parameter solution operator `G(t,s)` of
//! `u_t = Tr(Q(t,x) D^2 u) + <b(t,x), grad u>` on growing boxes, extracts
//! discrete transition kernels, constructs evolution systems of measures by
//! time averaging, and turns the structural properties of the family
//! (contraction, conservation, the two-parameter composition law, gradient
//! estimates, measure invariance, the space-time semigroup) into quantitative
//! checks, cross-validated by an independent Monte Carlo engine.

// stencil assembly and small dense kernels index several arrays in lockstep
#![allow(clippy::needless_range_loop)]

pub mod closed_form;
pub mod config;
pub mod evolution;
pub mod expr;
pub mod gradients;
pub mod grid;
pub mod linalg;
pub mod measures;
pub mod oracle;
pub mod presets;
pub mod problem;
pub mod report;
pub mod semigroup;
pub mod solver;
pub mod verify;
