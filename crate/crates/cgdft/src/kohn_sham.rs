//! Kohn-Sham split of the intrinsic energy by double inversion: the same
//! density is inverted in the interacting and in the non-interacting model,
//! the Hartree terms are computed with charge spread uniformly over cells,
//! and the exchange-correlation pieces close the two decompositions exactly.

use serde::Serialize;

use crate::density::CoarseDensity;
use crate::duality::{lieb_maximize, AscentOptions, InversionError, InversionResult};
use crate::engine::ModelSpec;
use crate::grid::ModelError;
use crate::potential::Potential;

#[derive(Debug, thiserror::Error)]
pub enum KsError {
    #[error("interacting inversion failed: {0}")]
    Interacting(#[source] InversionError),
    #[error("non-interacting inversion failed: {0}")]
    NonInteracting(#[source] InversionError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Kinetic part: the intrinsic energy of the same density in the model with
/// the interaction switched off, by potential inversion.
pub fn ts(
    spec: &ModelSpec,
    rho: &CoarseDensity,
    opts: &AscentOptions,
) -> Result<InversionResult, InversionError> {
    lieb_maximize(&spec.noninteracting(), rho, opts)
}

fn check_cells(spec: &ModelSpec, level: usize, averages: &[f64]) -> Result<usize, ModelError> {
    let hier = spec.hierarchy();
    hier.check_level(level)?;
    let k = hier.cell_count(level);
    if averages.len() != k {
        return Err(ModelError::BadLength2 {
            expected: k,
            got: averages.len(),
        });
    }
    Ok(k)
}

/// Classical self-interaction of the cell-uniform charge cloud:
/// (1/2) * sum_{i,j} rho(x_i) k(x_i, x_j) rho(x_j) h^2, where rho takes the
/// cell average at every grid point and k is the model's pair kernel.
/// Accepts arbitrary (including signed) cell values, so differences of
/// densities can be fed in directly.
pub fn hartree_energy(spec: &ModelSpec, level: usize, averages: &[f64]) -> Result<f64, ModelError> {
    check_cells(spec, level, averages)?;
    let phi = pointwise_potential(spec, level, averages);
    let grid = spec.grid();
    let h = grid.spacing();
    let hier = spec.hierarchy();
    let ppc = hier.points_per_cell(level);
    let mut e = 0.0;
    for (i, p) in phi.iter().enumerate() {
        e += averages[i / ppc] * p * h;
    }
    Ok(0.5 * e)
}

/// phi(x_i) = sum_j k(x_i, x_j) rho(x_j) h for the cell-uniform density.
fn pointwise_potential(spec: &ModelSpec, level: usize, averages: &[f64]) -> Vec<f64> {
    let grid = spec.grid();
    let m = grid.points();
    let h = grid.spacing();
    let hier = spec.hierarchy();
    let ppc = hier.points_per_cell(level);
    let mut phi = vec![0.0; m];
    for (i, p) in phi.iter_mut().enumerate() {
        let xi = grid.position(i);
        let mut acc = 0.0;
        for j in 0..m {
            acc += spec.soft_coulomb(xi, grid.position(j)) * averages[j / ppc];
        }
        *p = acc * h;
    }
    phi
}

/// Cell-averaged mean-field potential phi_R; linear in the density, and the
/// exact Frechet derivative of `hartree_energy`:
/// E_H(rho + t delta) = E_H(rho) + t <phi[rho], delta> + t^2 E_H(delta).
pub fn hartree_potential(
    spec: &ModelSpec,
    level: usize,
    averages: &[f64],
) -> Result<Potential, ModelError> {
    let k = check_cells(spec, level, averages)?;
    let phi = pointwise_potential(spec, level, averages);
    let hier = spec.hierarchy();
    let ppc = hier.points_per_cell(level);
    let mut cells = vec![0.0; k];
    for (r, c) in cells.iter_mut().enumerate() {
        *c = phi[r * ppc..(r + 1) * ppc].iter().sum::<f64>() / ppc as f64;
    }
    Potential::new(&hier, level, cells)
}

/// The closed decomposition F = T_s + E_H + E_xc with its potentials
/// v_s = v + phi + v_xc, all at the density's level. Both energy and
/// potential identities hold exactly by construction; the physics sits in
/// the two inversions whose diagnostics ride along.
#[derive(Debug, Clone, Serialize)]
pub struct KsReport {
    pub f: f64,
    pub t_s: f64,
    pub e_h: f64,
    pub e_xc: f64,
    /// Interacting representing potential, gauge E[v] = 0.
    pub v: Potential,
    /// Non-interacting representing potential, gauge E_s[v_s] = 0.
    pub v_s: Potential,
    /// Cell-averaged mean-field potential of the density.
    pub phi: Potential,
    /// v_s - v - phi cell-wise; unique because both gauges are pinned.
    pub v_xc: Potential,
    pub interacting: InversionResult,
    pub noninteracting: InversionResult,
}

impl KsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Invert the density in both models and close the decomposition.
pub fn ks_decompose(
    spec: &ModelSpec,
    rho: &CoarseDensity,
    opts: &AscentOptions,
) -> Result<KsReport, KsError> {
    let interacting = lieb_maximize(spec, rho, opts).map_err(KsError::Interacting)?;
    let noninteracting =
        lieb_maximize(&spec.noninteracting(), rho, opts).map_err(KsError::NonInteracting)?;
    let level = rho.level();
    let e_h = hartree_energy(spec, level, rho.averages())?;
    let phi = hartree_potential(spec, level, rho.averages())?;
    let f = interacting.f_value;
    let t_s = noninteracting.f_value;
    let e_xc = f - t_s - e_h;
    let v = interacting.potential.clone();
    let v_s = noninteracting.potential.clone();
    let xc_cells: Vec<f64> = v_s
        .values()
        .iter()
        .zip(v.values())
        .zip(phi.values())
        .map(|((s, vv), p)| s - vv - p)
        .collect();
    let v_xc = Potential::new(&spec.hierarchy(), level, xc_cells)?;
    Ok(KsReport {
        f,
        t_s,
        e_h,
        e_xc,
        v,
        v_s,
        phi,
        v_xc,
        interacting,
        noninteracting,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use crate::sampling;
    use rand::Rng;

    fn spec_n(points: usize, particles: usize, lambda: f64) -> ModelSpec {
        ModelSpec::new(Grid::new(1.0, points).unwrap(), particles, lambda, 0.5).unwrap()
    }

    fn interior(spec: &ModelSpec, level: usize, seed: u64, floor: f64) -> CoarseDensity {
        let mut rng = sampling::stream(seed, 0);
        sampling::interior_density(&spec.hierarchy(), level, spec.particles(), floor, &mut rng)
    }

    /// Independent double-sum oracle, written against the definition only.
    fn hartree_oracle(spec: &ModelSpec, level: usize, averages: &[f64]) -> f64 {
        let grid = spec.grid();
        let h = grid.spacing();
        let ppc = spec.hierarchy().points_per_cell(level);
        let mut e = 0.0;
        for i in 0..grid.points() {
            for j in 0..grid.points() {
                e += averages[i / ppc]
                    * averages[j / ppc]
                    * spec.soft_coulomb(grid.position(i), grid.position(j))
                    * h
                    * h;
            }
        }
        0.5 * e
    }

    #[test]
    fn hartree_energy_matches_oracle_and_scales_quadratically() {
        let spec = spec_n(64, 2, 1.0);
        let rho = interior(&spec, 3, 41, 0.2);
        let e = hartree_energy(&spec, 3, rho.averages()).unwrap();
        let oracle = hartree_oracle(&spec, 3, rho.averages());
        assert!((e - oracle).abs() <= 1e-12 * (1.0 + oracle.abs()));
        assert!(e >= 0.0);

        let doubled: Vec<f64> = rho.averages().iter().map(|a| 2.0 * a).collect();
        let e2 = hartree_energy(&spec, 3, &doubled).unwrap();
        assert!((e2 - 4.0 * e).abs() <= 1e-10 * (1.0 + e.abs()));

        assert_eq!(hartree_energy(&spec, 3, &[0.0; 8]).unwrap(), 0.0);
    }

    #[test]
    fn separated_charges_trend_like_kernel_of_the_distance() {
        // small softening so the cross term approaches lambda / distance
        let spec = ModelSpec::new(Grid::new(1.0, 128).unwrap(), 2, 1.0, 0.02).unwrap();
        let hier = spec.hierarchy();
        let level = 4; // 16 cells
        let w = hier.cell_width(level);
        let k = hier.cell_count(level);
        let charge = |cell: usize| {
            let mut a = vec![0.0; k];
            a[cell] = 1.0 / w; // unit mass in one cell
            a
        };
        for (i, j) in [(2, 7), (2, 10), (2, 13)] {
            let mut both = charge(i);
            for (b, c) in both.iter_mut().zip(charge(j)) {
                *b += c;
            }
            let cross = hartree_energy(&spec, level, &both).unwrap()
                - hartree_energy(&spec, level, &charge(i)).unwrap()
                - hartree_energy(&spec, level, &charge(j)).unwrap();
            let dist = (j as f64 - i as f64) * w;
            let coulomb = spec.interaction() / dist;
            assert!(
                (cross - coulomb).abs() <= 0.05 * coulomb,
                "cross {cross} vs {coulomb} at distance {dist}"
            );
        }
    }

    #[test]
    fn hartree_potential_is_linear_and_the_exact_derivative() {
        let spec = spec_n(64, 2, 1.0);
        let hier = spec.hierarchy();
        let rho = interior(&spec, 3, 42, 0.2);
        let mut rng = sampling::stream(42, 5);
        let delta = sampling::direction(8, hier.cell_width(3), &mut rng);

        let zero = hartree_potential(&spec, 3, &[0.0; 8]).unwrap();
        assert!(zero.values().iter().all(|&p| p == 0.0));

        // linearity, exactly
        let a = rho.averages();
        let b: Vec<f64> = delta.iter().map(|d| d * 0.3 + 0.1).collect();
        let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let pa = hartree_potential(&spec, 3, a).unwrap();
        let pb = hartree_potential(&spec, 3, &b).unwrap();
        let ps = hartree_potential(&spec, 3, &sum).unwrap();
        for ((x, y), s) in pa.values().iter().zip(pb.values()).zip(ps.values()) {
            assert!((x + y - s).abs() <= 1e-12 * (1.0 + s.abs()));
        }

        // Frechet check: the quadratic remainder coefficient is E_H(delta)
        // independent of t
        let phi = hartree_potential(&spec, 3, a).unwrap();
        let e0 = hartree_energy(&spec, 3, a).unwrap();
        let pairing: f64 = phi
            .values()
            .iter()
            .zip(&delta)
            .map(|(p, d)| p * d * hier.cell_width(3))
            .sum();
        let mut coeffs = Vec::new();
        for t in [1e-2, 1e-3] {
            let moved: Vec<f64> = a.iter().zip(&delta).map(|(x, d)| x + t * d).collect();
            let et = hartree_energy(&spec, 3, &moved).unwrap();
            coeffs.push((et - e0 - t * pairing) / (t * t));
        }
        let ratio = coeffs[0] / coeffs[1];
        assert!(
            (ratio - 1.0).abs() <= 0.1,
            "quadratic coefficients {coeffs:?}"
        );
        let eh_delta = hartree_energy(&spec, 3, &delta).unwrap();
        assert!((coeffs[0] - eh_delta).abs() <= 1e-6 * (1.0 + eh_delta.abs()));
    }

    #[test]
    fn hartree_is_midpoint_convex_on_quasi_densities() {
        let spec = spec_n(64, 2, 1.0);
        for seed in 0..5u64 {
            let mut rng = sampling::stream(60 + seed, 0);
            let x: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..2.0)).collect();
            let y: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..2.0)).collect();
            let mid: Vec<f64> = x.iter().zip(&y).map(|(a, b)| 0.5 * (a + b)).collect();
            let em = hartree_energy(&spec, 3, &mid).unwrap();
            let ex = hartree_energy(&spec, 3, &x).unwrap();
            let ey = hartree_energy(&spec, 3, &y).unwrap();
            assert!(em <= 0.5 * (ex + ey) + 1e-12);
            assert!(ex >= 0.0 && ey >= 0.0);
        }
    }

    #[test]
    fn one_particle_closure_makes_xc_cancel_the_mean_field() {
        let spec = spec_n(64, 1, 1.0);
        let rho = interior(&spec, 2, 43, 0.3);
        let rep = ks_decompose(&spec, &rho, &AscentOptions::tight()).unwrap();
        // one particle never feels the pair interaction
        assert!(
            (rep.f - rep.t_s).abs() <= 1e-8 * (1.0 + rep.f.abs()),
            "F {} vs T_s {}",
            rep.f,
            rep.t_s
        );
        assert!((rep.e_xc + rep.e_h).abs() <= 1e-8 * (1.0 + rep.e_h));
        for (xc, p) in rep.v_xc.values().iter().zip(rep.phi.values()) {
            assert!((xc + p).abs() <= 1e-5, "v_xc {} vs -phi {}", xc, -p);
        }
    }

    #[test]
    fn interacting_pair_closure_is_exact_and_xc_is_negative() {
        let spec = spec_n(16, 2, 1.0);
        let rho = interior(&spec, 2, 44, 0.3);
        let rep = ks_decompose(&spec, &rho, &AscentOptions::default()).unwrap();
        // identities are construction-exact
        assert!((rep.f - (rep.t_s + rep.e_h + rep.e_xc)).abs() <= 1e-12);
        for ((s, v), (p, xc)) in rep
            .v_s
            .values()
            .iter()
            .zip(rep.v.values())
            .zip(rep.phi.values().iter().zip(rep.v_xc.values()))
        {
            assert!((s - (v + p + xc)).abs() <= 1e-12);
        }
        // soft-Coulomb self-interaction dominates
        assert!(rep.e_xc < 0.0, "E_xc = {}", rep.e_xc);
        // interaction can only raise the constrained minimum
        assert!(rep.t_s <= rep.f + 1e-9, "T_s {} F {}", rep.t_s, rep.f);
        assert!(rep.e_h >= 0.0);
    }

    #[test]
    fn gauge_shifts_move_xc_by_their_difference() {
        let spec = spec_n(16, 2, 1.0);
        let rho = interior(&spec, 1, 45, 0.3);
        let rep = ks_decompose(&spec, &rho, &AscentOptions::default()).unwrap();
        let (c, c2) = (0.7, -0.4);
        let shifted_v = rep.v.shifted(c);
        let shifted_vs = rep.v_s.shifted(c2);
        for ((s, v), (p, xc)) in shifted_vs
            .values()
            .iter()
            .zip(shifted_v.values())
            .zip(rep.phi.values().iter().zip(rep.v_xc.values()))
        {
            let xc_shifted = s - v - p;
            assert!((xc_shifted - (xc + (c2 - c))).abs() <= 1e-12);
        }
    }

    #[test]
    fn kinetic_part_of_uniform_density_is_positive() {
        let spec = spec_n(64, 1, 0.0);
        let hier = spec.hierarchy();
        let w = hier.cell_width(1);
        let rho = CoarseDensity::new(&hier, 1, vec![0.5 / w; 2], 1).unwrap();
        let inv = ts(&spec, &rho, &AscentOptions::default()).unwrap();
        assert!(inv.f_value > 0.0);
    }

    #[test]
    fn xc_direction_matches_the_xc_potential_pairing() {
        let spec = spec_n(16, 2, 1.0);
        let hier = spec.hierarchy();
        let rho = interior(&spec, 2, 46, 0.35);
        let rep = ks_decompose(&spec, &rho, &AscentOptions::tight()).unwrap();
        let mut rng = sampling::stream(46, 9);
        let delta = sampling::direction(4, hier.cell_width(2), &mut rng);
        let w = hier.cell_width(2);

        let df = crate::calculus::directional_derivative(&spec, &rho, &delta, None).unwrap();
        let dts = crate::calculus::directional_derivative(
            &spec.noninteracting(),
            &rho,
            &delta,
            None,
        )
        .unwrap();
        let phi_pair: f64 = rep
            .phi
            .values()
            .iter()
            .zip(&delta)
            .map(|(p, d)| p * d * w)
            .sum();
        let measured = df.limit_estimate - dts.limit_estimate - phi_pair;
        let predicted: f64 = rep
            .v_xc
            .values()
            .iter()
            .zip(&delta)
            .map(|(p, d)| p * d * w)
            .sum();
        assert!(
            (measured - predicted).abs() <= 1e-3 * (1.0 + predicted.abs()),
            "E_xc' measured {measured} vs <v_xc, delta> {predicted}"
        );
    }
}
