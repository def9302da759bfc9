//! Finite-element reconstruction of cortical surface currents from scalp
//! potentials.
//!
//! The library builds tetrahedral shell meshes, assembles the first-order
//! optimality (KKT) system for a Tikhonov-regularized boundary-control
//! problem, solves it with direct or iterative sparse solvers, and provides
//! an independent dense lead-field route for cross-checking, plus a mixed
//! quasi-reversibility baseline solver and synthetic-data utilities.

pub mod analytic;
pub mod assembly;
pub mod config;
pub mod error;
pub mod io;
pub mod mesh;
pub mod pipeline;
pub mod solver;
pub mod sparse;
pub mod systems;
pub mod vec3;

pub use error::{Error, Result};
