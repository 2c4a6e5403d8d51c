//! Fine (per-point) and coarse (per-cell average) densities, projection and
//! embedding between them, p-norms, the discrete gradient, and the
//! von Weizsacker functional.
//!
//! Densities carry their particle count and are mass-checked at construction:
//! quadrature integral equals N to within a relative 1e-10. Values may be
//! negative (difference quotients and scans produce signed quasi-densities);
//! positivity is a queried property, not an invariant.

use crate::grid::{Grid, ModelError, ScaleHierarchy};
use crate::tolerances;
use serde::{Deserialize, Serialize};

fn check_finite(values: &[f64]) -> Result<(), ModelError> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(ModelError::NonFinite(i)),
        None => Ok(()),
    }
}

fn check_mass(mass: f64, particles: usize) -> Result<(), ModelError> {
    let n = particles as f64;
    if (mass - n).abs() > tolerances::MASS_REL * n.max(1.0) {
        Err(ModelError::MassMismatch { mass, particles })
    } else {
        Ok(())
    }
}

pub fn check_particles(particles: usize) -> Result<(), ModelError> {
    if particles == 1 || particles == 2 {
        Ok(())
    } else {
        Err(ModelError::BadParticles(particles))
    }
}

/// Lp norm of a sampled function under measure `weight` per entry.
fn norm_lp_weighted(values: &[f64], weight: f64, p: f64) -> Result<f64, ModelError> {
    if p.is_nan() || p < 1.0 {
        return Err(ModelError::BadExponent(p));
    }
    if p.is_infinite() {
        return Ok(values.iter().fold(0.0f64, |m, v| m.max(v.abs())));
    }
    let s: f64 = values.iter().map(|v| v.abs().powf(p)).sum();
    Ok((weight * s).powf(1.0 / p))
}

/// Per-point density on the fine grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineDensity {
    grid: Grid,
    values: Vec<f64>,
    particles: usize,
}

impl FineDensity {
    pub fn new(grid: Grid, values: Vec<f64>, particles: usize) -> Result<Self, ModelError> {
        check_particles(particles)?;
        if values.len() != grid.points() {
            return Err(ModelError::BadLength2 {
                expected: grid.points(),
                got: values.len(),
            });
        }
        check_finite(&values)?;
        check_mass(grid.integrate(&values), particles)?;
        Ok(FineDensity {
            grid,
            values,
            particles,
        })
    }

    /// Rescale arbitrary non-negative samples to carry exactly N particles.
    pub fn from_unnormalized(
        grid: Grid,
        values: Vec<f64>,
        particles: usize,
    ) -> Result<Self, ModelError> {
        check_particles(particles)?;
        check_finite(&values)?;
        let mass = grid.integrate(&values);
        if !(mass.is_finite() && mass > 0.0) {
            return Err(ModelError::MassMismatch { mass, particles });
        }
        let scale = particles as f64 / mass;
        let values = values.iter().map(|v| v * scale).collect();
        FineDensity::new(grid, values, particles)
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn particles(&self) -> usize {
        self.particles
    }

    pub fn mass(&self) -> f64 {
        self.grid.integrate(&self.values)
    }

    pub fn is_nonnegative(&self) -> bool {
        self.values.iter().all(|&v| v >= 0.0)
    }

    pub fn is_strictly_positive(&self) -> bool {
        self.values.iter().all(|&v| v > 0.0)
    }

    pub fn norm_lp(&self, p: f64) -> Result<f64, ModelError> {
        norm_lp_weighted(&self.values, self.grid.spacing(), p)
    }

    /// L2 pairing h * sum(f g) against another per-point sampling.
    pub fn pair_values(&self, other: &[f64]) -> f64 {
        debug_assert_eq!(other.len(), self.values.len());
        self.grid.spacing()
            * self
                .values
                .iter()
                .zip(other)
                .map(|(a, b)| a * b)
                .sum::<f64>()
    }

    /// Pointwise difference as a raw sampled function (mass cancels).
    pub fn difference(&self, other: &FineDensity) -> Vec<f64> {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a - b)
            .collect()
    }
}

/// Central-difference gradient with second-order one-sided stencils at the
/// walls.
pub fn discrete_gradient(grid: Grid, values: &[f64]) -> Vec<f64> {
    let m = values.len();
    debug_assert_eq!(m, grid.points());
    let h = grid.spacing();
    let mut g = vec![0.0; m];
    g[0] = (-3.0 * values[0] + 4.0 * values[1] - values[2]) / (2.0 * h);
    g[m - 1] = (3.0 * values[m - 1] - 4.0 * values[m - 2] + values[m - 3]) / (2.0 * h);
    for i in 1..m - 1 {
        g[i] = (values[i + 1] - values[i - 1]) / (2.0 * h);
    }
    g
}

/// Both discretizations of the von Weizsacker functional.
#[derive(Debug, Clone, Copy)]
pub struct VonWeizsackerForms {
    /// Bond form: (1/2) sum over bonds, walls included, of
    /// (sqrt(rho_next) - sqrt(rho_prev))^2 / h. This is exactly the kinetic
    /// energy of the positive one-particle state with this density, so the
    /// one-particle identity F = T_W holds to solver precision.
    pub bond: f64,
    /// Ratio form: h * sum over points of |grad rho|^2 / (8 rho) with the
    /// central-difference gradient. Diagnostic only: it agrees with the bond
    /// form to O(h) (the integrand does not vanish at the walls, so interior
    /// quadrature misses two wall strips), and it is undefined (None) when
    /// the density vanishes at a point where its gradient does not.
    pub ratio: Option<f64>,
}

/// Von Weizsacker kinetic energy (hbar = m = 1, kinetic prefactor 1/2),
/// bond form. Finite for every nonnegative density -- it is the kinetic
/// energy of the nonnegative wavefunction sqrt(rho) -- and +inf for
/// quasi-densities with a negative value.
pub fn von_weizsacker(density: &FineDensity) -> f64 {
    von_weizsacker_forms(density).map_or(f64::INFINITY, |f| f.bond)
}

/// Both forms, or None when the density leaves the domain (negative values).
pub fn von_weizsacker_forms(density: &FineDensity) -> Option<VonWeizsackerForms> {
    let v = density.values();
    let h = density.grid().spacing();
    if v.iter().any(|&x| x < 0.0) {
        return None;
    }
    let grad = discrete_gradient(density.grid(), v);
    let mut ratio = Some(0.0);
    for i in 0..v.len() {
        if v[i] == 0.0 {
            if grad[i].abs() > 0.0 {
                ratio = None; // 0/0: the ratio integrand is undefined here
            }
        } else if let Some(r) = ratio.as_mut() {
            *r += grad[i] * grad[i] / (8.0 * v[i]);
        }
    }
    let ratio = ratio.map(|r| r * h);

    let mut bond = 0.0;
    let mut prev = 0.0f64; // wall
    for &x in v {
        let s = x.sqrt();
        bond += (s - prev) * (s - prev);
        prev = s;
    }
    bond += prev * prev; // far wall
    bond /= 2.0 * h;

    Some(VonWeizsackerForms { bond, ratio })
}

/// Per-cell averages at a fixed level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoarseDensity {
    grid: Grid,
    level: usize,
    averages: Vec<f64>,
    particles: usize,
}

impl CoarseDensity {
    pub fn new(
        hierarchy: &ScaleHierarchy,
        level: usize,
        averages: Vec<f64>,
        particles: usize,
    ) -> Result<Self, ModelError> {
        check_particles(particles)?;
        hierarchy.check_level(level)?;
        if averages.len() != hierarchy.cell_count(level) {
            return Err(ModelError::BadLength2 {
                expected: hierarchy.cell_count(level),
                got: averages.len(),
            });
        }
        check_finite(&averages)?;
        let w = hierarchy.cell_width(level);
        check_mass(w * averages.iter().sum::<f64>(), particles)?;
        Ok(CoarseDensity {
            grid: hierarchy.grid(),
            level,
            averages,
            particles,
        })
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn hierarchy(&self) -> ScaleHierarchy {
        ScaleHierarchy::new(self.grid)
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn averages(&self) -> &[f64] {
        &self.averages
    }

    pub fn particles(&self) -> usize {
        self.particles
    }

    pub fn cell_width(&self) -> f64 {
        self.hierarchy().cell_width(self.level)
    }

    /// Per-cell masses (average times cell width).
    pub fn masses(&self) -> Vec<f64> {
        let w = self.cell_width();
        self.averages.iter().map(|a| a * w).collect()
    }

    pub fn mass(&self) -> f64 {
        self.cell_width() * self.averages.iter().sum::<f64>()
    }

    /// All cell averages non-negative (the closed cone).
    pub fn is_nonnegative(&self) -> bool {
        self.averages.iter().all(|&a| a >= 0.0)
    }

    /// All cell averages strictly positive (the interior, where the
    /// representing potential exists).
    pub fn is_strictly_positive(&self) -> bool {
        self.averages.iter().all(|&a| a > 0.0)
    }

    pub fn norm_lp(&self, p: f64) -> Result<f64, ModelError> {
        norm_lp_weighted(&self.averages, self.cell_width(), p)
    }

    /// L1 distance between two densities at the same level.
    pub fn distance_l1(&self, other: &CoarseDensity) -> f64 {
        debug_assert_eq!(self.level, other.level);
        let w = self.cell_width();
        self.averages
            .iter()
            .zip(&other.averages)
            .map(|(a, b)| (a - b).abs() * w)
            .sum()
    }

    /// rho + s * delta for a sum-zero per-cell perturbation.
    pub fn displaced(&self, delta: &[f64], s: f64) -> Result<CoarseDensity, ModelError> {
        if delta.len() != self.averages.len() {
            return Err(ModelError::BadLength2 {
                expected: self.averages.len(),
                got: delta.len(),
            });
        }
        let w = self.cell_width();
        let mass: f64 = w * delta.iter().sum::<f64>();
        if mass.abs() > tolerances::MASS_REL * self.particles as f64 {
            return Err(ModelError::NotSumZero(mass));
        }
        let averages = self
            .averages
            .iter()
            .zip(delta)
            .map(|(a, d)| a + s * d)
            .collect();
        CoarseDensity::new(&self.hierarchy(), self.level, averages, self.particles)
    }
}

impl ScaleHierarchy {
    /// Cell averages of a fine density: per-cell quadrature mass divided by
    /// the cell width. Orthogonal projection in the sampled L2 sense.
    pub fn project(
        &self,
        density: &FineDensity,
        level: usize,
    ) -> Result<CoarseDensity, ModelError> {
        if density.grid() != self.grid() {
            return Err(ModelError::GridMismatch);
        }
        self.check_level(level)?;
        let ppc = self.points_per_cell(level);
        let averages = density
            .values()
            .chunks_exact(ppc)
            .map(|c| c.iter().sum::<f64>() / ppc as f64)
            .collect();
        CoarseDensity::new(self, level, averages, density.particles())
    }

    /// Piecewise-constant fine density taking the cell average everywhere in
    /// the cell. Projecting back reproduces the input exactly.
    pub fn embed(&self, density: &CoarseDensity) -> FineDensity {
        let ppc = self.points_per_cell(density.level());
        let mut values = Vec::with_capacity(self.grid().points());
        for &a in density.averages() {
            values.extend(std::iter::repeat(a).take(ppc));
        }
        FineDensity::new(self.grid(), values, density.particles())
            .expect("embedding preserves mass by construction")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> Grid {
        Grid::new(1.0, 128).unwrap()
    }

    /// Ground-state density of the empty box, normalized on the grid.
    fn box_density(g: Grid) -> FineDensity {
        let l = g.length();
        let vals: Vec<f64> = g
            .positions()
            .iter()
            .map(|&x| (std::f64::consts::PI * x / l).sin().powi(2))
            .collect();
        FineDensity::from_unnormalized(g, vals, 1).unwrap()
    }

    #[test]
    fn mass_is_checked() {
        let g = grid();
        let bad = vec![1.0; 128];
        assert!(matches!(
            FineDensity::new(g, bad, 1),
            Err(ModelError::MassMismatch { .. })
        ));
        let uniform = FineDensity::from_unnormalized(g, vec![1.0; 128], 2).unwrap();
        assert!((uniform.mass() - 2.0).abs() <= 1e-12);
    }

    #[test]
    fn uniform_projects_to_the_same_constant_at_every_level() {
        let g = grid();
        let h = ScaleHierarchy::new(g);
        let uniform = FineDensity::from_unnormalized(g, vec![1.0; 128], 1).unwrap();
        let c = uniform.values()[0];
        for n in 0..=h.deepest_level() {
            let p = h.project(&uniform, n).unwrap();
            for &a in p.averages() {
                assert!((a - c).abs() <= 1e-14);
            }
        }
    }

    #[test]
    fn project_matches_per_cell_riemann_sums() {
        // independent oracle: explicit per-cell quadrature mass / width
        let g = grid();
        let h = ScaleHierarchy::new(g);
        let d = box_density(g);
        for n in [1usize, 3, 5] {
            let p = h.project(&d, n).unwrap();
            let (w, hs) = (h.cell_width(n), g.spacing());
            for (cell, &a) in p.averages().iter().enumerate() {
                let (s, e) = h.cell_points(n, cell);
                let mass: f64 = d.values()[s..e].iter().sum::<f64>() * hs;
                assert!((a - mass / w).abs() <= 1e-12);
            }
            assert!((p.mass() - 1.0).abs() <= 1e-10);
        }
    }

    #[test]
    fn embed_then_project_round_trips() {
        let g = grid();
        let h = ScaleHierarchy::new(g);
        let p = h.project(&box_density(g), 3).unwrap();
        let back = h.project(&h.embed(&p), 3).unwrap();
        for (a, b) in p.averages().iter().zip(back.averages()) {
            assert!((a - b).abs() <= 1e-14);
        }
        // telescoping: averaging the embedded field at a finer level keeps
        // the step values
        let finer = h.project(&h.embed(&p), 5).unwrap();
        for (cell, &a) in finer.averages().iter().enumerate() {
            assert!((a - p.averages()[cell / 4]).abs() <= 1e-14);
        }
    }

    #[test]
    fn projection_is_orthogonal_in_l2() {
        let g = grid();
        let h = ScaleHierarchy::new(g);
        let d = box_density(g);
        let n = 4;
        let coarse = h.project(&d, n).unwrap();
        let resid = d.difference(&h.embed(&coarse));
        // pair the residual against any level-n step function
        let step: Vec<f64> = (0..g.points())
            .map(|i| (h.cell_of_point(n, i) as f64).sin() + 0.25)
            .collect();
        let pair = g.spacing()
            * resid
                .iter()
                .zip(&step)
                .map(|(r, s)| r * s)
                .sum::<f64>();
        assert!(pair.abs() <= 1e-12);
    }

    #[test]
    fn norms_and_exponent_guard() {
        let g = grid();
        let d = box_density(g);
        assert!((d.norm_lp(1.0).unwrap() - 1.0).abs() <= 1e-10);
        assert!(d.norm_lp(0.5).is_err());
        let uniform = FineDensity::from_unnormalized(g, vec![1.0; 128], 1).unwrap();
        // constant field: every p-norm is c * (total measure)^(1/p)
        let c = uniform.values()[0];
        let measure = g.spacing() * 128.0;
        for p in [1.0, 2.0, 3.0] {
            let expect = c * measure.powf(1.0 / p);
            assert!((uniform.norm_lp(p).unwrap() - expect).abs() <= 1e-12);
        }
        assert!((uniform.norm_lp(f64::INFINITY).unwrap() - c).abs() <= 1e-15);
    }

    #[test]
    fn coarse_norm_is_jensen_contracted() {
        let g = grid();
        let h = ScaleHierarchy::new(g);
        let d = box_density(g);
        for n in [1usize, 2, 4] {
            let p = h.project(&d, n).unwrap();
            for q in [2.0, 3.0] {
                assert!(p.norm_lp(q).unwrap() <= d.norm_lp(q).unwrap() + 1e-12);
            }
        }
    }

    #[test]
    fn gradient_matches_analytic_derivative_at_second_order() {
        let check = |points: usize| -> f64 {
            let g = Grid::new(1.0, points).unwrap();
            let k = 2.0 * std::f64::consts::PI;
            let vals: Vec<f64> = g.positions().iter().map(|&x| (k * x).sin()).collect();
            let grad = discrete_gradient(g, &vals);
            g.positions()
                .iter()
                .zip(&grad)
                .map(|(&x, &gv)| (gv - k * (k * x).cos()).abs())
                .fold(0.0f64, f64::max)
        };
        let coarse = check(64);
        let fine = check(128);
        assert!(fine < coarse / 3.0, "not O(h^2): {coarse} -> {fine}");
        assert!(fine < 2e-2);
    }

    #[test]
    fn von_weizsacker_of_box_ground_state() {
        // analytic: T_W = (1/2) integral |d/dx sqrt(rho)|^2 = pi^2 / (2 L^2)
        // for rho = (2/L) sin^2(pi x / L); the grid value carries an O(h^2)
        // discretization offset.
        let g = grid();
        let d = box_density(g);
        let forms = von_weizsacker_forms(&d).unwrap();
        let analytic = std::f64::consts::PI.powi(2) / 2.0;
        assert!((forms.bond - analytic).abs() / analytic < 1e-3);
        // the ratio integrand tends to pi^2 cos^2 at the walls, so interior
        // quadrature misses about 2 * (h/2) * pi^2, an O(h) deficit of
        // roughly 1.6% at M = 128
        let ratio = forms.ratio.unwrap();
        assert!((ratio - analytic).abs() / analytic < 3e-2);
        assert!(ratio < forms.bond);
    }

    #[test]
    fn von_weizsacker_sentinels() {
        let g = grid();
        // negative values leave the domain entirely
        let neg = FineDensity::from_unnormalized(
            g,
            {
                let mut v = vec![1.0; 128];
                v[40] = -1e-3;
                v
            },
            1,
        )
        .unwrap();
        assert!(!neg.is_nonnegative());
        assert!(von_weizsacker(&neg).is_infinite());
        // an asymmetric zero keeps the bond form finite but leaves the ratio
        // form undefined
        let mut vals: Vec<f64> = (0..128).map(|i| 1.0 + 0.01 * i as f64).collect();
        vals[40] = 0.0;
        let d = FineDensity::from_unnormalized(g, vals, 1).unwrap();
        let forms = von_weizsacker_forms(&d).unwrap();
        assert!(forms.bond.is_finite());
        assert!(forms.ratio.is_none());
        assert!(von_weizsacker(&d).is_finite());
    }

    #[test]
    fn displaced_requires_sum_zero() {
        let g = grid();
        let h = ScaleHierarchy::new(g);
        let p = h.project(&box_density(g), 2).unwrap();
        let mut delta = vec![0.0; 4];
        delta[0] = 1.0;
        assert!(p.displaced(&delta, 0.1).is_err());
        delta[1] = -1.0;
        let moved = p.displaced(&delta, 0.05).unwrap();
        assert!((moved.mass() - 1.0).abs() <= 1e-10);
    }
}
