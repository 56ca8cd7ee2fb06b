//! Minimum-energy (Mortensen) state estimation for systems with quadratic
//! state nonlinearity
//!
//! ```text
//! x'(t) = A x + G (x ⊗ x) + F v,    x(0) = x0 + η,
//! y(t)  = C x + μ,
//! ```
//!
//! The crate is `no_std` (it needs `alloc`). Everything is expressed in the
//! shifted coordinates `ξ = x − x̃`, `ω = y − C x̃` around the nominal
//! trajectory `x̃` of the undisturbed system.
//!
//! Module map:
//!
//! * [`kron`]: the quadratic form `G (x ⊗ x)` and its bilinearization.
//! * [`ode`]: fixed-step RK4 on uniform grids, forward and backward.
//! * [`model`]: problem definition, nominal trajectory, truth simulation.
//! * [`ocp`]: the energy-minimization control problem behind `V(t, ξ, ω)`
//!   and the linear-quadratic KKT solver used for its derivatives.
//! * [`value`]: value function, gradient, Hessian, HJB and Bellman checks.
//! * [`riccati`]: differential Riccati equation and Kalman–Bucy covariance.
//! * [`observers`]: Mortensen, argmin, EKF and Kalman–Bucy estimators.
//!
//! # Kronecker convention
//!
//! `G` is an `n × n²` matrix. Column `i·n + j` multiplies `xᵢ·xⱼ`, i.e. the
//! Kronecker product `x ⊗ x` is laid out row-major.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod error;
pub mod kron;
pub mod model;
pub mod observers;
pub mod ocp;
pub mod ode;
pub mod riccati;
pub mod value;

pub use error::{Error, Result};
pub use kron::QuadraticForm;
pub use model::{DisturbanceScenario, Nominal, SystemModel};
pub use observers::{ObserverMethod, ObserverOptions, ObserverRun};
pub use ocp::{OcpInstance, OcpSolution, SolverOptions};
pub use ode::{TimeGrid, Trajectory};
pub use riccati::RiccatiSolution;
pub use value::{HessianMethod, ValueFunction, ValueProbe};

pub use nalgebra::{DMatrix, DVector};
