//! Data-driven Monge optimal-transport barycenter solver.
//!
//! Given sample pairs `{x_i, z_i}`, the solver finds an invertible,
//! covariate-indexed map `y = T(x, z)` that makes `y` statistically
//! independent of `z` at minimal quadratic transport cost. Independence is
//! enforced adversarially through the top singular values of a small coupling
//! matrix built from data-adapted test-function spaces, and the whole problem
//! reduces to gradient descent over the sample positions `y`.
//!
//! The closed-form inverse `X(y, z)` of the fitted map drives everything
//! downstream: conditional simulation, plain Monge optimal transport via a
//! binary covariate, regular and conditional density estimation by change of
//! variables, and grid-based Bayesian inference.
//!
//! Module map:
//! - [`data`]: covariate schemas, Euclidean embedding, CSV ingestion and the
//!   synthetic generators used by the test and benchmark suites.
//! - [`kernelspace`]: adaptive Gaussian mollifier spaces (and polynomial
//!   variants) with per-center bandwidth fitting, gradients and Hessians.
//! - [`basis`]: rank-reduced orthogonalization of feature matrices under a
//!   frozen empirical inner product.
//! - [`solver`]: the penalized gradient-descent flow with adaptive penalty,
//!   Armijo line search, staged refresh and tracer points.
//! - [`transport`]: frozen stage maps, closed-form inversion, Jacobians,
//!   factor extraction and conditional simulation.
//! - [`otdensity`]: Monge OT through the binary-covariate reduction, density
//!   estimation and Bayesian posteriors.
//! - [`bench`]: the scaling benchmark harness.

pub mod basis;
pub mod bench;
pub mod data;
pub mod error;
pub mod kernelspace;
pub mod otdensity;
pub mod serialize;
pub mod solver;
pub mod sparse;
pub mod stats;
pub mod transport;

pub use error::{Error, Result};
