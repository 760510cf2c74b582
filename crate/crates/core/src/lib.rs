//! Interpolated Rabinowitz action functionals on the discretized free loop
//! space of a product of standard symplectic planes.
//!
//! The crate is organized bottom-up:
//!
//! - [`geometry`]: pointwise symplectic data (factor Hamiltonians, Hamiltonian
//!   vector fields, the Liouville form, the coupling `f`).
//! - [`loopspace`]: band-limited loops, spectral calculus, torus
//!   reparametrizations, averages, area and H-oscillation.
//! - [`functionals`]: the interpolated action, its L² gradient and norms.
//! - [`flow`]: negative gradient flow integrators.
//! - [`critical`]: reduced and full solvers for critical points.
//! - [`verify`]: executable verification suites and constant estimation.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity)]

pub mod critical;
pub mod error;
pub mod flow;
pub mod functionals;
pub mod geometry;
pub mod loopspace;
pub mod verify;

pub use error::{Error, Result};
pub use geometry::{Coupling, CouplingDescriptor, Factor, Plane, ProductSystem};
pub use loopspace::{FlowState, Loop, TorusShift};
