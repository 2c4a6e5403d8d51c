//! Numerical tolerances used across the crate.
//!
//! Everything that compares floating point numbers against a threshold pulls
//! the threshold from here, so the knobs live in one place and the tests and
//! the command line agree on what "converged" means.

/// Relative slack for mass bookkeeping (quadrature integral vs particle count).
pub const MASS_REL: f64 = 1e-10;

/// Default L1 residual below which an inversion counts as converged.
pub const RESIDUAL_DEFAULT: f64 = 1e-6;

/// Tight residual used internally when a duality gap must be negligible
/// (excess reports, Fenchel-Young sampling, quotient traces).
pub const RESIDUAL_TIGHT: f64 = 1e-10;

/// |E[v]| after the gauge shift must land below this.
pub const GAUGE_DEFAULT: f64 = 1e-8;

/// Iteration cap for the dual ascent.
pub const MAX_ITERATIONS_DEFAULT: usize = 2000;

/// Ground spaces are clustered at this fraction of the spectral width.
pub const DEGENERACY_REL: f64 = 1e-8;

/// Largest ground-space multiplicity the ensemble machinery will accept.
pub const DEGENERACY_GUARD: usize = 8;

/// Pair-basis dimension guard for the two-particle sector.
pub const PAIR_DIM_GUARD: usize = 20_000;

/// At or below this dimension the eigenproblem is solved densely; above it
/// the matrix-free Lanczos path takes over.
pub const DENSE_DIM_LIMIT: usize = 600;

/// Relative residual target for iterative eigenpairs.
pub const LANCZOS_TOL: f64 = 1e-9;

/// Proximal-search budget for Ekeland certificate repair.
pub const EKELAND_SOLVE_CAP: usize = 50;

/// Ascent iterations without relative improvement of the best mass residual
/// before the maximization declares itself stalled and returns its best
/// iterate instead of burning the iteration cap.
pub const ASCENT_STALL_LIMIT: usize = 60;

/// Agreement required between F + <v, rho> and -E[v] after the gauge fix.
pub const GAUGE_IDENTITY: f64 = 1e-9;

/// Slack allowed when checking exact identities that only see solver noise.
pub const IDENTITY_SLACK: f64 = 1e-8;

/// Slack for inequalities that hold algebraically on the grid.
pub const INEQUALITY_SLACK: f64 = 1e-9;

/// Monotone structures (scale sweeps, difference quotients) may wobble by
/// this much before a violation is reported.
pub const MONOTONE_SLACK: f64 = 1e-7;

/// Relative tolerance for the one-step Richardson limit estimate.
pub const RICHARDSON_REL: f64 = 1e-4;

/// Representability probe: stabilization threshold on sup|v| between levels.
pub const PROBE_STABILIZE: f64 = 0.05;

/// Representability probe: growth factor that flags a blow-up.
pub const PROBE_BLOWUP: f64 = 2.0;
