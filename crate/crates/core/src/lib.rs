//! Equilibrium solutions for time-inconsistent discrete-time mean-field
//! stochastic linear-quadratic control.
//!
//! The solvers are generic over the scalar type (`f32` or `f64`); the
//! aliases at the bottom of this file fix `f64`, which is what the CLI uses.

pub mod equilibrium;
pub mod error;
pub mod linalg;
pub mod model;
pub mod recursions;
pub mod reference;
pub mod scalar;
pub mod simulate;
pub mod verify;

pub use error::{Error, Result};
pub use linalg::Tolerances;
pub use scalar::{Mat, Scalar, Vector};

pub type Problem = model::ProblemSpec<f64>;
pub type Tables = recursions::BackwardTables<f64>;
pub type Policy = equilibrium::EquilibriumPolicy<f64>;
pub type Matrix = Mat<f64>;
pub type Vec64 = Vector<f64>;
