//! Cell-wise constant external potentials and the dual pairing <v, rho>.

use crate::density::{CoarseDensity, FineDensity};
use crate::grid::{Grid, ModelError, ScaleHierarchy};
use serde::{Deserialize, Serialize};

/// A potential constant on each cell of one partition level. `gauge_offset`
/// records the cumulative constant shift applied since construction, so a
/// gauge-fixed result remembers how far it moved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Potential {
    grid: Grid,
    level: usize,
    values: Vec<f64>,
    gauge_offset: f64,
}

impl Potential {
    pub fn new(
        hierarchy: &ScaleHierarchy,
        level: usize,
        values: Vec<f64>,
    ) -> Result<Self, ModelError> {
        hierarchy.check_level(level)?;
        if values.len() != hierarchy.cell_count(level) {
            return Err(ModelError::BadLength2 {
                expected: hierarchy.cell_count(level),
                got: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite(i));
        }
        Ok(Potential {
            grid: hierarchy.grid(),
            level,
            values,
            gauge_offset: 0.0,
        })
    }

    pub fn constant(hierarchy: &ScaleHierarchy, level: usize, value: f64) -> Self {
        Potential::new(hierarchy, level, vec![value; hierarchy.cell_count(level)])
            .expect("constant potential is always well formed")
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn gauge_offset(&self) -> f64 {
        self.gauge_offset
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// v + c with the shift recorded.
    pub fn shifted(&self, c: f64) -> Potential {
        Potential {
            grid: self.grid,
            level: self.level,
            values: self.values.iter().map(|v| v + c).collect(),
            gauge_offset: self.gauge_offset + c,
        }
    }

    /// Same step function expressed on a finer partition.
    pub fn refine_to(&self, level: usize) -> Result<Potential, ModelError> {
        let hier = ScaleHierarchy::new(self.grid);
        hier.check_level(level)?;
        if level < self.level {
            return Err(ModelError::LevelOrder {
                potential: self.level,
                density: level,
            });
        }
        let copies = 1usize << (level - self.level);
        let mut values = Vec::with_capacity(self.values.len() * copies);
        for &v in &self.values {
            values.extend(std::iter::repeat(v).take(copies));
        }
        Ok(Potential {
            grid: self.grid,
            level,
            values,
            gauge_offset: self.gauge_offset,
        })
    }

    /// Sampled on the fine grid.
    pub fn embed_values(&self) -> Vec<f64> {
        let hier = ScaleHierarchy::new(self.grid);
        let ppc = hier.points_per_cell(self.level);
        let mut out = Vec::with_capacity(self.grid.points());
        for &v in &self.values {
            out.extend(std::iter::repeat(v).take(ppc));
        }
        out
    }

    /// <v, rho> = sum over cells of v * average * width. The potential may
    /// live on a coarser level than the density; the converse is rejected.
    pub fn pair_coarse(&self, rho: &CoarseDensity) -> Result<f64, ModelError> {
        if self.grid != rho.grid() {
            return Err(ModelError::GridMismatch);
        }
        if self.level > rho.level() {
            return Err(ModelError::LevelOrder {
                potential: self.level,
                density: rho.level(),
            });
        }
        let v = self.refine_to(rho.level())?;
        let w = rho.cell_width();
        Ok(v.values
            .iter()
            .zip(rho.averages())
            .map(|(a, b)| a * b * w)
            .sum())
    }

    /// <v, rho> = h * sum over points; equals the cell-wise pairing exactly
    /// when rho is an embedded coarse density.
    pub fn pair_fine(&self, rho: &FineDensity) -> Result<f64, ModelError> {
        if self.grid != rho.grid() {
            return Err(ModelError::GridMismatch);
        }
        Ok(rho.pair_values(&self.embed_values()))
    }

    /// Cell-wise sup distance to another potential on the same level,
    /// optionally restricted to a cell window.
    pub fn sup_distance(&self, other: &Potential, window: Option<(usize, usize)>) -> f64 {
        debug_assert_eq!(self.level, other.level);
        let (a, b) = window.unwrap_or((0, self.values.len()));
        self.values[a..b]
            .iter()
            .zip(&other.values[a..b])
            .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
    }
}
