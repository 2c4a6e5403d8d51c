//! Coarse-grained density functional laboratory for a one-dimensional
//! few-fermion box.
//!
//! The crate couples an exact few-body quantum engine (one or two spinless
//! fermions on a fine Dirichlet grid, soft-Coulomb repulsion) to a
//! coarse-graining ladder of dyadic cell averages, and builds the whole
//! variational apparatus on top: the universal density functional by
//! constrained search / concave maximization, its dual ground-state energy,
//! exact inversions (density to potential), subdifferential and directional
//! derivative probes, a Kohn-Sham decomposition by double inversion, and
//! multiscale convergence diagnostics.

pub mod calculus;
pub mod config;
pub mod density;
pub mod duality;
pub mod engine;
pub mod grid;
pub mod io;
pub mod kohn_sham;
mod lanczos;
pub mod multiscale;
pub mod potential;
pub mod sampling;
pub mod suite;
pub mod tolerances;

pub use density::{CoarseDensity, FineDensity};
pub use engine::{EngineError, GroundSolution, GroundSpace, ModelSpec};
pub use grid::{Grid, ModelError, ScaleHierarchy};
pub use potential::Potential;
