//! Reconstruction of 2D density fields by sparse sets of capsule ("pill")
//! primitives.
//!
//! A pill is a segment dilated by a radius. Its signed distance field is
//! mapped through a clipped transition function into a pseudo-density, the
//! per-pill densities are combined by a smooth aggregation operator, and the
//! result is averaged per element of a fixed Cartesian grid. Every step of
//! that chain carries closed-form gradients and Hessians with respect to the
//! five design parameters of each pill, which makes Newton-type minimization
//! of tracking/reward objectives possible.
//!
//! The crate is organized along that chain:
//!
//! - [`geometry`]: capsule parameterization and distance jets
//! - [`transition`]: signed distance to pseudo-density mappings
//! - [`aggregation`]: multi-feature combination operators
//! - [`grid`]: Cartesian mesh, tensor quadrature, element averages
//! - [`objective`]: tracking/reward functionals and constraints
//! - [`solver`]: constrained Newton / L-BFGS minimization
//! - [`pipeline`]: initialization, staging, pruning/merging, refinement
//! - [`io`]: targets, pill tables, run configuration, result export

pub mod aggregation;
pub mod checks;
mod error;
pub mod geometry;
pub mod grid;
pub mod io;
pub mod jet;
pub mod objective;
pub mod pipeline;
pub mod solver;
pub mod transition;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[cfg(test)]
pub(crate) fn test_rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}
