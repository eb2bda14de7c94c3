//! Numerical laboratory for conservative spin systems.
//!
//! The central object is the measure `σ_M` on `ℝⁿ` with energy
//! `Σᵢ V(xᵢ) + V(M - Σᵢ xᵢ)`, `V(u) = u²/2 + F(u)` with `F` bounded, and its
//! lift `μ_M` to the hyperplane `Σ = M` of `ℝ^{n+1}`. The crate provides
//! exact low-dimensional quadrature, grid discretizations of the reversible
//! generator, Monte Carlo samplers for larger `n`, and the lattice tools
//! needed to turn mean-field constants into nearest-neighbour ones.

pub mod error;
pub mod funineq;
pub mod kawasaki;
pub mod luyau;
pub mod model;
pub mod observable;
pub mod potential;
pub mod quadrature;
pub mod sampler;
pub mod sparse;
pub mod stats;
pub mod tol;

pub use error::{Error, Result};
pub use model::{ConservativeModel, GaussianBase};
pub use potential::{Family, PerturbationSpec};
