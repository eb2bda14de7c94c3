//! Shared numerical tolerances.

/// Eigenvalue assertions on exactly assembled matrices.
pub const EXACT_EIGEN: f64 = 1e-8;
/// Eigenvalue assertions on matrices built from finite differences.
pub const FD_EIGEN: f64 = 1e-6;
/// Conservation of the total spin under pair updates.
pub const CONSERVATION: f64 = 1e-10;
/// Relative tolerance of the quadrature decompositions.
pub const DECOMPOSITION_REL: f64 = 1e-6;
/// Residual of the conditional-expectation identities.
pub const IDENTITY_RESIDUAL: f64 = 1e-5;
