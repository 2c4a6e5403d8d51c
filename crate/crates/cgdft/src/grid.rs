//! Uniform Dirichlet grid and the dyadic partition hierarchy above it.
//!
//! The box [0, L] is discretized with M interior points at x_i = (i+1) h,
//! h = L / (M + 1), and hard walls at both ends. M is a power of two so that
//! every dyadic partition boundary falls between two grid points and each
//! level-n cell owns exactly M / 2^n points. Quadrature is the midpoint-style
//! sum h * sum(f), so the measure a cell carries is h times its point count.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("box length must be positive and finite, got {0}")]
    BadLength(f64),
    #[error("point count must be a power of two >= 16, got {0}")]
    BadPoints(usize),
    #[error("particle count must be 1 or 2, got {0}")]
    BadParticles(usize),
    #[error("interaction strength must be >= 0 and finite, got {0}")]
    BadInteraction(f64),
    #[error("interaction softening must be > 0 and finite, got {0}")]
    BadSoftening(f64),
    #[error("level {level} exceeds the deepest level {deepest}")]
    BadLevel { level: usize, deepest: usize },
    #[error("expected {expected} values, got {got}")]
    BadLength2 { expected: usize, got: usize },
    #[error("quadrature mass {mass} does not match particle count {particles}")]
    MassMismatch { mass: f64, particles: usize },
    #[error("values belong to a different grid")]
    GridMismatch,
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("potential level {potential} is finer than density level {density}")]
    LevelOrder { potential: usize, density: usize },
    #[error("perturbation does not sum to zero (mass {0})")]
    NotSumZero(f64),
    #[error("p-norm exponent must satisfy p >= 1, got {0}")]
    BadExponent(f64),
}

/// Interior-point discretization of the hard-walled box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    length: f64,
    points: usize,
}

impl Grid {
    pub fn new(length: f64, points: usize) -> Result<Self, ModelError> {
        if !(length.is_finite() && length > 0.0) {
            return Err(ModelError::BadLength(length));
        }
        if points < 16 || !points.is_power_of_two() {
            return Err(ModelError::BadPoints(points));
        }
        Ok(Grid { length, points })
    }

    /// Sub-boxes used for single-cell problems skip the size floor but keep
    /// the power-of-two shape.
    pub(crate) fn cell_box(length: f64, points: usize) -> Self {
        debug_assert!(points.is_power_of_two());
        Grid { length, points }
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn points(&self) -> usize {
        self.points
    }

    pub fn spacing(&self) -> f64 {
        self.length / (self.points as f64 + 1.0)
    }

    pub fn position(&self, i: usize) -> f64 {
        (i as f64 + 1.0) * self.spacing()
    }

    pub fn positions(&self) -> Vec<f64> {
        (0..self.points).map(|i| self.position(i)).collect()
    }

    /// Number of dyadic levels below the whole-box partition; level K has one
    /// point per cell.
    pub fn deepest_level(&self) -> usize {
        self.points.trailing_zeros() as usize
    }

    /// Quadrature of a per-point sampling: h * sum(values).
    pub fn integrate(&self, values: &[f64]) -> f64 {
        self.spacing() * values.iter().sum::<f64>()
    }
}

/// Dyadic partitions of the box, level n holding 2^n equal contiguous cells.
/// The deepest level is the grid itself.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleHierarchy {
    grid: Grid,
}

impl ScaleHierarchy {
    pub fn new(grid: Grid) -> Self {
        ScaleHierarchy { grid }
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn deepest_level(&self) -> usize {
        self.grid.deepest_level()
    }

    pub fn check_level(&self, level: usize) -> Result<(), ModelError> {
        if level > self.deepest_level() {
            Err(ModelError::BadLevel {
                level,
                deepest: self.deepest_level(),
            })
        } else {
            Ok(())
        }
    }

    pub fn cell_count(&self, level: usize) -> usize {
        1usize << level
    }

    pub fn points_per_cell(&self, level: usize) -> usize {
        self.grid.points >> level
    }

    /// Quadrature width of a level-n cell: spacing times points per cell.
    /// This is the measure the cell carries, and it makes projection,
    /// embedding and mass bookkeeping close exactly.
    pub fn cell_width(&self, level: usize) -> f64 {
        self.grid.spacing() * self.points_per_cell(level) as f64
    }

    /// Geometric diameter of a level-n cell, L / 2^n. Slightly larger than
    /// the quadrature width; used where an interval diameter is the honest
    /// constant (Poincare-type bounds).
    pub fn diameter(&self, level: usize) -> f64 {
        self.grid.length() / self.cell_count(level) as f64
    }

    pub fn cell_of_point(&self, level: usize, point: usize) -> usize {
        point / self.points_per_cell(level)
    }

    /// Half-open point range [start, end) of a cell.
    pub fn cell_points(&self, level: usize, cell: usize) -> (usize, usize) {
        let ppc = self.points_per_cell(level);
        (cell * ppc, (cell + 1) * ppc)
    }
}
