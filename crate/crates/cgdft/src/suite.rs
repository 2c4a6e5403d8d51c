//! The acceptance battery: every theorem-level property of the laboratory
//! as one named, seeded criterion producing CSV tables and a verdict.
//!
//! Each criterion is deterministic given (model, seed, tolerances): sample
//! streams are indexed per sample, parallel maps collect in index order, and
//! no wall-clock data enters a table, so re-running a criterion reproduces
//! its artifacts byte for byte. `verify_all` strings the criteria together
//! for the command line and for continuous integration; reproducibility of
//! the whole battery is itself checked by running it twice and comparing
//! rendered artifacts.

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use std::collections::BTreeMap;
use std::time::Instant;
use thiserror::Error;

use crate::calculus::{self, CalculusError};
use crate::config::{ModelSection, ToleranceSet};
use crate::density::{von_weizsacker, CoarseDensity, FineDensity};
use crate::duality::{
    ground_energy, lieb_maximize, AscentOptions, InversionError, InversionResult,
};
use crate::engine::{self, EngineError, EnsembleState, ModelSpec};
use crate::grid::ModelError;
use crate::io::{format_float as ff, format_int as fi, Table};
use crate::kohn_sham::{self, KsError};
use crate::multiscale::{self, MultiscaleError, ProbeKind};
use crate::potential::Potential;
use crate::sampling;
use crate::tolerances;

#[derive(Debug, Error)]
pub enum SuiteError {
    #[error("criterion index must be 1..=11, got {0}")]
    BadIndex(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Inversion(#[from] InversionError),
    #[error(transparent)]
    Calculus(#[from] CalculusError),
    #[error(transparent)]
    Multiscale(#[from] MultiscaleError),
    #[error(transparent)]
    Ks(#[from] KsError),
    #[error("config: {0}")]
    Config(String),
}

/// Verdict and artifacts of one acceptance criterion.
#[derive(Debug, Clone, Serialize)]
pub struct CriterionOutcome {
    pub index: usize,
    pub name: &'static str,
    pub passed: bool,
    /// One line of measured numbers behind the verdict.
    pub detail: String,
    /// Wall time; recorded in the JSON summary only, never in a CSV.
    pub wall_seconds: f64,
    #[serde(skip)]
    pub tables: Vec<Table>,
}

impl CriterionOutcome {
    pub fn line(&self) -> String {
        format!(
            "{} {:>2}. {:<28} {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.index,
            self.name,
            self.detail
        )
    }
}

/// All criteria in order, with an overall verdict.
#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub outcomes: Vec<CriterionOutcome>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.outcomes.iter().all(|o| o.passed)
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        for o in &self.outcomes {
            s.push_str(&o.line());
            s.push('\n');
        }
        s.push_str(if self.passed() {
            "verdict: PASS\n"
        } else {
            "verdict: FAIL\n"
        });
        s
    }

    /// Every CSV body keyed by file stem; the reproducibility check compares
    /// two of these maps byte for byte.
    pub fn rendered_csv(&self) -> BTreeMap<String, String> {
        let mut map = BTreeMap::new();
        for o in &self.outcomes {
            for t in &o.tables {
                map.insert(t.name.clone(), t.to_csv());
            }
        }
        map
    }
}

pub const CRITERION_NAMES: [&str; 11] = [
    "inversion-fixed-point",
    "one-particle-identity",
    "potential-recovery",
    "monotone-convergence",
    "directional-derivative",
    "quasi-continuity",
    "continuity-modulus",
    "bounds-suite",
    "duality-suite",
    "kohn-sham-closure",
    "blowup-demonstrations",
];

/// Run one criterion by 1-based index.
pub fn run_criterion(
    index: usize,
    model: &ModelSection,
    seed: u64,
    tols: &ToleranceSet,
) -> Result<CriterionOutcome, SuiteError> {
    let start = Instant::now();
    let (passed, detail, tables) = match index {
        1 => inversion_fixed_point(model, seed, tols)?,
        2 => one_particle_identity(model, seed, tols)?,
        3 => potential_recovery(model, seed, tols)?,
        4 => monotone_convergence(model, seed, tols)?,
        5 => directional_derivative(model, seed, tols)?,
        6 => quasi_continuity(model, seed, tols)?,
        7 => continuity_modulus(model, seed, tols)?,
        8 => bounds_suite(model, seed, tols)?,
        9 => duality_suite(model, seed, tols)?,
        10 => kohn_sham_closure(model, seed, tols)?,
        11 => blowup_demonstrations(model, seed, tols)?,
        _ => return Err(SuiteError::BadIndex(index)),
    };
    Ok(CriterionOutcome {
        index,
        name: CRITERION_NAMES[index - 1],
        passed,
        detail,
        wall_seconds: start.elapsed().as_secs_f64(),
        tables,
    })
}

/// The full battery in order.
pub fn verify_all(
    model: &ModelSection,
    seed: u64,
    tols: &ToleranceSet,
) -> Result<SuiteReport, SuiteError> {
    let mut outcomes = Vec::with_capacity(11);
    for index in 1..=11 {
        outcomes.push(run_criterion(index, model, seed, tols)?);
    }
    Ok(SuiteReport { outcomes })
}

type Verdict = (bool, String, Vec<Table>);

pub fn spec_for(model: &ModelSection, particles: usize) -> Result<ModelSpec, SuiteError> {
    let grid = crate::grid::Grid::new(model.length, model.points)
        .map_err(|e| SuiteError::Config(e.to_string()))?;
    ModelSpec::new(grid, particles, model.interaction, model.softening)
        .map_err(|e| SuiteError::Config(e.to_string()))
}

/// Ground density of the cell-wise embedding of `values` on the fine grid
/// (ensemble-averaged if the ground space is degenerate).
pub fn forward_density(spec: &ModelSpec, values: &[f64]) -> Result<FineDensity, SuiteError> {
    let sol = engine::ground_space(spec, values, None)?;
    let state = if sol.space.degeneracy == 1 {
        EnsembleState::pure(sol.space.basis[0].clone(), spec.particles())
    } else {
        let deg = sol.space.degeneracy;
        EnsembleState::new(
            vec![1.0 / deg as f64; deg],
            sol.space.basis.clone(),
            spec.particles(),
        )
    }
    .map_err(SuiteError::Engine)?;
    Ok(spec.density_of(&state)?)
}

/// A wall-compatible fine density: the ground density of a smooth two-mode
/// potential. These vanish at the hard walls the way every representable
/// density must, so they are the test family for convergence experiments.
pub fn smooth_ground_density(
    spec: &ModelSpec,
    amplitude: f64,
    phase: f64,
) -> Result<FineDensity, SuiteError> {
    let v: Vec<f64> = spec
        .grid()
        .positions()
        .iter()
        .map(|&x| {
            amplitude * (2.0 * std::f64::consts::PI * x / spec.grid().length() + phase).cos()
                + 0.5 * amplitude
                    * (6.0 * std::f64::consts::PI * x / spec.grid().length()).sin()
        })
        .collect();
    forward_density(spec, &v)
}

/// A density with a regularized node at the center of the box. Pinching the
/// density toward zero in the interior is the canonical way to push the
/// representing potential's sup norm to infinity under refinement.
pub fn node_density(spec: &ModelSpec) -> Result<FineDensity, SuiteError> {
    let grid = spec.grid();
    let center = 0.5 * grid.length();
    let values: Vec<f64> = grid
        .positions()
        .iter()
        .map(|&x| (x - center).powi(2) + 1e-3)
        .collect();
    FineDensity::from_unnormalized(grid, values, spec.particles()).map_err(SuiteError::Model)
}

/// Tight inversion of the projection of a fine density, warm-started from
/// two coarser levels so deep levels converge quickly.
fn warm_tight_invert(
    spec: &ModelSpec,
    fine: &FineDensity,
    level: usize,
) -> Result<InversionResult, SuiteError> {
    let hier = spec.hierarchy();
    let first = level.saturating_sub(2).max(1);
    let mut warm: Option<Potential> = None;
    for l in first..=level {
        let rho = hier.project(fine, l)?;
        let mut opts = if l == level {
            AscentOptions::tight()
        } else {
            AscentOptions::default()
        };
        if let Some(v) = warm.take() {
            opts = opts.with_initial(v.refine_to(l)?);
        }
        let res = lieb_maximize(spec, &rho, &opts)?;
        if l == level {
            return Ok(res);
        }
        warm = Some(res.potential);
    }
    unreachable!("loop always returns at the final level");
}

/// Criterion 1: the inversion is a fixed point of the projection. Random
/// interior coarse densities at levels 1-4 invert to potentials whose
/// ground densities project back onto them within the mass residual, with
/// the gauge pinned.
fn inversion_fixed_point(
    model: &ModelSection,
    seed: u64,
    tols: &ToleranceSet,
) -> Result<Verdict, SuiteError> {
    let spec = spec_for(model, 1)?;
    let hier = spec.hierarchy();
    let per_level = 50usize;
    let cases: Vec<(usize, usize)> = (1..=4usize)
        .flat_map(|l| (0..per_level).map(move |k| (l, k)))
        .collect();
    let results: Vec<(usize, usize, InversionResult)> = cases
        .par_iter()
        .map(|&(level, k)| {
            let mut rng = sampling::stream(seed, 10_000 + (level * 1000 + k) as u64);
            let rho = sampling::interior_density(&hier, level, 1, 0.2, &mut rng);
            lieb_maximize(&spec, &rho, &AscentOptions::default())
                .map(|r| (level, k, r))
                .map_err(SuiteError::from)
        })
        .collect::<Result<_, _>>()?;

    let mut table = Table::new(
        "inversion_fixed_point",
        &["level", "sample", "residual", "gauge", "f_value", "iterations", "converged"],
    );
    let mut worst_res = 0.0f64;
    let mut worst_gauge = 0.0f64;
    let mut all_ok = true;
    for (level, k, r) in &results {
        worst_res = worst_res.max(r.residual);
        worst_gauge = worst_gauge.max(r.gauge_residual);
        all_ok &= r.converged;
        table.push(vec![
            fi(*level as i64),
            fi(*k as i64),
            ff(r.residual),
            ff(r.gauge_residual),
            ff(r.f_value),
            fi(r.iterations as i64),
            fi(r.converged as i64),
        ]);
    }
    let passed = all_ok && worst_res <= tols.residual_l1 && worst_gauge <= tols.gauge_abs;
    let detail = format!(
        "200 inversions, worst residual {worst_res:.2e} (cap {:.0e}), worst gauge {worst_gauge:.2e} (cap {:.0e})",
        tols.residual_l1, tols.gauge_abs
    );
    Ok((passed, detail, vec![table]))
}

/// Criterion 2: with one particle the functional is exactly the gradient
/// form of its own maximizer density.
fn one_particle_identity(
    model: &ModelSection,
    seed: u64,
    tols: &ToleranceSet,
) -> Result<Verdict, SuiteError> {
    let spec = spec_for(model, 1)?;
    let hier = spec.hierarchy();
    let level = 3usize;
    let rows: Vec<(usize, f64, f64)> = (0..20usize)
        .into_par_iter()
        .map(|k| {
            let mut rng = sampling::stream(seed, 20_000 + k as u64);
            let rho = sampling::interior_density(&hier, level, 1, 0.2, &mut rng);
            let inv = lieb_maximize(&spec, &rho, &AscentOptions::tight())?;
            let tw = von_weizsacker(&inv.lambda_density);
            Ok::<_, SuiteError>((k, inv.f_value, tw))
        })
        .collect::<Result<_, _>>()?;

    let mut table = Table::new(
        "one_particle_identity",
        &["sample", "f_n", "gradient_form", "rel_err"],
    );
    let mut worst = 0.0f64;
    for (k, f, tw) in &rows {
        let rel = (f - tw).abs() / f.abs().max(f64::MIN_POSITIVE);
        worst = worst.max(rel);
        table.push(vec![fi(*k as i64), ff(*f), ff(*tw), ff(rel)]);
    }
    let passed = worst <= tols.one_particle_rel;
    let detail = format!(
        "20 densities at level {level}, worst relative gap {worst:.2e} (cap {:.0e})",
        tols.one_particle_rel
    );
    Ok((passed, detail, vec![table]))
}

/// Criterion 3: densities forward-generated from known cell potentials are
/// inverted back to those potentials modulo a constant, cell by cell.
fn potential_recovery(
    model: &ModelSection,
    seed: u64,
    tols: &ToleranceSet,
) -> Result<Verdict, SuiteError> {
    let spec = spec_for(model, 1)?;
    let hier = spec.hierarchy();
    let level = 5usize.min(hier.deepest_level());
    let length = spec.grid().length();
    let cells = hier.cell_count(level);
    let w = hier.cell_width(level);

    let cases: Vec<(usize, Potential)> = (0..10usize)
        .map(|i| {
            let mut rng = sampling::stream(seed, 30_000 + i as u64);
            let amp: f64 = rng.random_range(1.0..5.0);
            let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let values: Vec<f64> = (0..cells)
                .map(|c| {
                    let x = (c as f64 + 0.5) * w;
                    amp * (2.0 * std::f64::consts::PI * x / length + phase).cos()
                        + 0.5 * amp * (6.0 * std::f64::consts::PI * x / length).sin()
                })
                .collect();
            let v = Potential::new(&hier, level, values).expect("cells match the level");
            (i, v)
        })
        .collect();

    let rows: Vec<(usize, f64, f64, f64)> = cases
        .par_iter()
        .map(|(i, v0)| {
            let fine = forward_density(&spec, &v0.embed_values())?;
            let inv = warm_tight_invert(&spec, &fine, level)?;
            let diff: Vec<f64> = inv
                .potential
                .values()
                .iter()
                .zip(v0.values())
                .map(|(a, b)| a - b)
                .collect();
            let hi = diff.iter().cloned().fold(f64::MIN, f64::max);
            let lo = diff.iter().cloned().fold(f64::MAX, f64::min);
            // best constant shift for the sup norm is the midpoint
            let err = 0.5 * (hi - lo);
            Ok::<_, SuiteError>((*i, v0.sup_norm(), err, inv.residual))
        })
        .collect::<Result<_, _>>()?;

    let mut table = Table::new(
        "potential_recovery",
        &["case", "v_sup", "max_cell_err", "allowed", "residual"],
    );
    let mut passed = true;
    let mut worst_rel = 0.0f64;
    for (i, sup, err, residual) in &rows {
        let allowed = tols.recovery_rel * sup;
        passed &= err <= &allowed;
        worst_rel = worst_rel.max(err / sup);
        table.push(vec![fi(*i as i64), ff(*sup), ff(*err), ff(allowed), ff(*residual)]);
    }
    let detail = format!(
        "10 potentials recovered at level {level}, worst cell error {worst_rel:.2e} of sup norm (cap {:.0e})",
        tols.recovery_rel
    );
    Ok((passed, detail, vec![table]))
}

/// Criterion 4: the level values increase monotonically and land within a
/// stated fraction of the grid value by level 5.
fn monotone_convergence(
    model: &ModelSection,
    seed: u64,
    tols: &ToleranceSet,
) -> Result<Verdict, SuiteError> {
    let spec = spec_for(model, 1)?;
    let deepest = spec.hierarchy().deepest_level();
    let levels: Vec<usize> = vec![1, 2, 3, 4, 5, deepest];
    let cases: Vec<(usize, f64, f64)> = (0..5usize)
        .map(|i| {
            let mut rng = sampling::stream(seed, 40_000 + i as u64);
            let amp: f64 = rng.random_range(1.0..5.0);
            let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            (i, amp, phase)
        })
        .collect();
    let sweeps: Vec<(usize, multiscale::ScaleSweep)> = cases
        .par_iter()
        .map(|&(i, amp, phase)| {
            let fine = smooth_ground_density(&spec, amp, phase)?;
            let sweep = multiscale::scale_sweep(&spec, &fine, &levels)?;
            Ok::<_, SuiteError>((i, sweep))
        })
        .collect::<Result<_, _>>()?;

    let mut table = Table::new(
        "monotone_convergence",
        &["density", "level", "f_n", "dist_1", "v_sup", "converged"],
    );
    let mut passed = true;
    let mut worst_violation = 0.0f64;
    let mut worst_gap = 0.0f64;
    for (i, sweep) in &sweeps {
        for row in &sweep.rows {
            table.push(vec![
                fi(*i as i64),
                fi(row.level as i64),
                ff(row.f_n),
                ff(row.dist_1),
                ff(row.v_sup),
                fi(row.converged as i64),
            ]);
            passed &= row.converged;
        }
        worst_violation = worst_violation.max(sweep.monotone_violation);
        let f5 = sweep
            .rows
            .iter()
            .find(|r| r.level == 5)
            .map(|r| r.f_n)
            .unwrap_or(f64::NAN);
        let gap = (sweep.f_deepest - f5) / sweep.f_deepest.abs().max(f64::MIN_POSITIVE);
        worst_gap = worst_gap.max(gap);
        passed &= f5 <= sweep.f_deepest + tols.monotone_slack;
    }
    passed &= worst_violation <= tols.monotone_slack && worst_gap <= tols.gap_rel;
    let detail = format!(
        "5 densities over levels {levels:?}: worst monotone violation {worst_violation:.2e} (cap {:.0e}), worst level-5 gap {:.4}% (cap {}%)",
        tols.monotone_slack,
        100.0 * worst_gap,
        100.0 * tols.gap_rel
    );
    Ok((passed, detail, vec![table]))
}

/// Criterion 5: one-sided difference quotients of the functional decrease
/// monotonically and converge to minus the potential pairing.
fn directional_derivative(
    model: &ModelSection,
    seed: u64,
    tols: &ToleranceSet,
) -> Result<Verdict, SuiteError> {
    let spec = spec_for(model, 1)?;
    let hier = spec.hierarchy();
    let level = 3usize;
    let w = hier.cell_width(level);
    let cells = hier.cell_count(level);

    let rows: Vec<(usize, f64, f64, f64, f64)> = (0..50usize)
        .into_par_iter()
        .map(|k| {
            let mut rng = sampling::stream(seed, 50_000 + k as u64);
            let rho = sampling::interior_density(&hier, level, 1, 0.25, &mut rng);
            let delta = sampling::direction(cells, w, &mut rng);
            let base = lieb_maximize(&spec, &rho, &AscentOptions::tight())?;
            let pairing: f64 = base
                .potential
                .values()
                .iter()
                .zip(&delta)
                .map(|(v, d)| v * d * w)
                .sum();
            let trace = calculus::directional_derivative(&spec, &rho, &delta, None)?;
            let defect = (trace.limit_estimate + pairing).abs();
            Ok::<_, SuiteError>((k, pairing, trace.limit_estimate, defect, trace.monotone_violation))
        })
        .collect::<Result<_, _>>()?;

    let mut table = Table::new(
        "directional_derivative",
        &["sample", "pairing", "limit_estimate", "defect", "allowed", "monotone_violation"],
    );
    let mut passed = true;
    let mut worst_rel = 0.0f64;
    let mut worst_mono = 0.0f64;
    for (k, pairing, limit, defect, mono) in &rows {
        let allowed = tols.derivative_rel * (1.0 + pairing.abs());
        passed &= defect <= &allowed && mono <= &tols.quotient_monotone;
        worst_rel = worst_rel.max(defect / (1.0 + pairing.abs()));
        worst_mono = worst_mono.max(*mono);
        table.push(vec![
            fi(*k as i64),
            ff(*pairing),
            ff(*limit),
            ff(*defect),
            ff(allowed),
            ff(*mono),
        ]);
    }
    let detail = format!(
        "50 directions at level {level}: worst defect {worst_rel:.2e} of 1+|pairing| (cap {:.0e}), worst quotient increase {worst_mono:.2e} (cap {:.0e})",
        tols.derivative_rel, tols.quotient_monotone
    );
    Ok((passed, detail, vec![table]))
}

/// Criterion 6: the product map stays continuous; its worst distance over a
/// log-spaced radius ladder decreases strictly and drops by at least a
/// factor of ten over two decades.
fn quasi_continuity(
    model: &ModelSection,
    seed: u64,
    tols: &ToleranceSet,
) -> Result<Verdict, SuiteError> {
    let spec = spec_for(model, 1)?;
    let hier = spec.hierarchy();
    let level = 2usize;
    let box_density = forward_density(&spec, &vec![0.0; spec.grid().points()])?;
    let rho = hier.project(&box_density, level)?;
    let radii: Vec<f64> = (0..20)
        .map(|i| 10f64.powf(-1.0 - 2.0 * i as f64 / 19.0))
        .collect();
    let rows = multiscale::quasi_continuity_probe(&spec, &rho, &radii, 4, seed)?;

    let mut table = Table::new(
        "quasi_continuity",
        &["radius", "samples", "failures", "max_product_l1", "mean_product_l1", "max_window_sup"],
    );
    for r in &rows {
        table.push(vec![
            ff(r.radius),
            fi(r.samples as i64),
            fi(r.failures as i64),
            ff(r.max_product_l1),
            ff(r.mean_product_l1),
            ff(r.max_window_sup),
        ]);
    }
    let strictly_decreasing = rows
        .windows(2)
        .all(|p| p[1].max_product_l1 < p[0].max_product_l1);
    let no_failures = rows.iter().all(|r| r.failures == 0);
    let ratio = rows.last().unwrap().max_product_l1 / rows[0].max_product_l1;
    let passed = strictly_decreasing && no_failures && ratio <= tols.quasi_ratio;
    let detail = format!(
        "20 radii 1e-1..1e-3 at level {level}: strictly decreasing = {strictly_decreasing}, last/first = {ratio:.3e} (cap {:.0e})",
        tols.quasi_ratio
    );
    Ok((passed, detail, vec![table]))
}

/// Criterion 7: the continuity modulus of the functional shrinks with the
/// perturbation radius and is negligible at radius 1e-6 per particle.
fn continuity_modulus(
    model: &ModelSection,
    seed: u64,
    tols: &ToleranceSet,
) -> Result<Verdict, SuiteError> {
    let spec = spec_for(model, 1)?;
    let hier = spec.hierarchy();
    let level = 2usize;
    let box_density = forward_density(&spec, &vec![0.0; spec.grid().points()])?;
    let rho = hier.project(&box_density, level)?;
    let n = spec.particles() as f64;
    let target_radius = 1e-6 * n;
    let radii: Vec<f64> = (0..9)
        .map(|i| 10f64.powf(-2.0 - 0.5 * i as f64))
        .collect();
    debug_assert!((radii[8] - target_radius).abs() < 1e-18);
    let report = multiscale::continuity_modulus(&spec, &rho, &radii, 4, seed)?;

    let mut table = Table::new(
        "continuity_modulus",
        &["radius", "max_two_sided", "max_downward", "failures"],
    );
    for r in &report.rows {
        table.push(vec![
            ff(r.radius),
            ff(r.max_two_sided),
            ff(r.max_downward),
            fi(r.failures as i64),
        ]);
    }
    let decreasing = report
        .rows
        .windows(2)
        .all(|p| p[1].max_two_sided < p[0].max_two_sided);
    let no_failures = report.rows.iter().all(|r| r.failures == 0);
    let at_target = report
        .rows
        .iter()
        .find(|r| (r.radius - target_radius).abs() <= 1e-18)
        .map(|r| r.max_two_sided.max(r.max_downward))
        .unwrap_or(f64::NAN);
    let passed = decreasing && no_failures && at_target <= tols.modulus_cap;
    let detail = format!(
        "9 radii 1e-2..1e-6 at level {level}: decreasing = {decreasing}, modulus at 1e-6*N = {at_target:.2e} (cap {:.0e})",
        tols.modulus_cap
    );
    Ok((passed, detail, vec![table]))
}

/// Criterion 8: the bound suite. Jensen contraction, the cell-wise
/// averaging bound, and the gradient bound hold on random smooth densities;
/// every inversion obeys the packing ceiling.
fn bounds_suite(
    model: &ModelSection,
    seed: u64,
    _tols: &ToleranceSet,
) -> Result<Verdict, SuiteError> {
    let spec = spec_for(model, 1)?;
    let grid = spec.grid();
    let hier = spec.hierarchy();
    let audit_levels = [2usize, 4usize];

    let audits: Vec<(usize, usize, multiscale::InequalityAudit)> = (0..200usize)
        .into_par_iter()
        .map(|k| {
            let mut rng = sampling::stream(seed, 80_000 + k as u64);
            let rho = sampling::smooth_density(grid, 1, 4, 0.8, &mut rng);
            let mut out = Vec::new();
            for &level in &audit_levels {
                out.push((k, level, multiscale::inequality_audit(&rho, level)?));
            }
            Ok::<_, SuiteError>(out)
        })
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .flatten()
        .collect();

    let mut table = Table::new(
        "bounds_suite",
        &["sample", "level", "jensen_2_excess", "jensen_3_excess", "poincare_margin", "cauchy_schwarz_margin", "gradient_l1", "kinetic_form"],
    );
    let slack = tolerances::INEQUALITY_SLACK;
    let mut violations = 0usize;
    for (k, level, a) in &audits {
        if a.jensen_2_excess > slack
            || a.jensen_3_excess > slack
            || a.poincare_margin < -slack
            || a.cauchy_schwarz_margin < -slack
        {
            violations += 1;
        }
        table.push(vec![
            fi(*k as i64),
            fi(*level as i64),
            ff(a.jensen_2_excess),
            ff(a.jensen_3_excess),
            ff(a.poincare_margin),
            ff(a.cauchy_schwarz_margin),
            ff(a.gradient_l1),
            ff(a.von_weizsacker),
        ]);
    }

    // Packing ceiling on real inversions, one and two particles.
    let spec2 = spec_for(model, 2)?;
    let fbound_cases: Vec<(usize, usize)> = (1..=3usize)
        .flat_map(|l| (0..8usize).map(move |k| (l, k)))
        .chain((1..=2usize).map(|l| (l, 100)))
        .collect();
    let fbound_rows: Vec<(usize, usize, usize, f64, f64)> = fbound_cases
        .par_iter()
        .map(|&(level, k)| {
            let two = k >= 100;
            let (s, n) = if two { (&spec2, 2usize) } else { (&spec, 1usize) };
            let mut rng = sampling::stream(seed, 85_000 + (level * 500 + k) as u64);
            let rho = sampling::interior_density(&hier, level, n, 0.2, &mut rng);
            let inv = lieb_maximize(s, &rho, &AscentOptions::default())?;
            let ceiling = n as f64 * engine::f_max(s, level)?;
            Ok::<_, SuiteError>((n, level, k, inv.f_value, ceiling))
        })
        .collect::<Result<_, _>>()?;

    let mut ftable = Table::new(
        "packing_ceiling",
        &["particles", "level", "sample", "f_n", "ceiling"],
    );
    let mut fbound_violations = 0usize;
    for (n, level, k, f, ceiling) in &fbound_rows {
        if !(*f >= -slack && (*f <= *ceiling + slack || !ceiling.is_finite())) {
            fbound_violations += 1;
        }
        ftable.push(vec![fi(*n as i64), fi(*level as i64), fi(*k as i64), ff(*f), ff(*ceiling)]);
    }

    let passed = violations == 0 && fbound_violations == 0;
    let detail = format!(
        "{} audits on 200 smooth densities: {violations} inequality violations; {} inversions: {fbound_violations} ceiling violations",
        audits.len(),
        fbound_rows.len()
    );
    Ok((passed, detail, vec![table, ftable]))
}

/// Criterion 9: duality. The pairing lower bound holds on random pairs, the
/// ground energy is midpoint concave, the functional is midpoint convex,
/// and the energetic excess never dips below zero.
fn duality_suite(
    model: &ModelSection,
    seed: u64,
    tols: &ToleranceSet,
) -> Result<Verdict, SuiteError> {
    let spec = spec_for(model, 1)?;
    let hier = spec.hierarchy();
    let level = 2usize;
    let n_rho = 50usize;
    let n_pot = 10usize;

    // F values once per density, ground energies once per potential.
    let densities: Vec<(CoarseDensity, f64)> = (0..n_rho)
        .into_par_iter()
        .map(|k| {
            let mut rng = sampling::stream(seed, 90_000 + k as u64);
            let rho = sampling::interior_density(&hier, level, 1, 0.15, &mut rng);
            let f = lieb_maximize(&spec, &rho, &AscentOptions::tight())?.f_value;
            Ok::<_, SuiteError>((rho, f))
        })
        .collect::<Result<_, _>>()?;
    let potentials: Vec<(Potential, f64)> = (0..n_pot)
        .into_par_iter()
        .map(|j| {
            let mut rng = sampling::stream(seed, 91_000 + j as u64);
            let v = sampling::cell_potential(&hier, level, 4.0, &mut rng);
            let e = ground_energy(&spec, &v)?;
            Ok::<_, SuiteError>((v, e))
        })
        .collect::<Result<_, _>>()?;

    let mut pair_table = Table::new(
        "fenchel_young",
        &["density", "potential", "f_value", "pairing", "ground_energy", "excess"],
    );
    let mut worst_excess = f64::INFINITY;
    let mut fy_violations = 0usize;
    for (k, (rho, f)) in densities.iter().enumerate() {
        for (j, (v, e)) in potentials.iter().enumerate() {
            let pairing = v.pair_coarse(rho)?;
            let excess = f + pairing - e;
            worst_excess = worst_excess.min(excess);
            if excess < -tols.fenchel_slack {
                fy_violations += 1;
            }
            pair_table.push(vec![
                fi(k as i64),
                fi(j as i64),
                ff(*f),
                ff(pairing),
                ff(*e),
                ff(excess),
            ]);
        }
    }
    let excess_ok = worst_excess >= -tols.excess_floor;

    // Midpoint concavity of the ground energy.
    let concavity_rows: Vec<(usize, f64)> = (0..100usize)
        .into_par_iter()
        .map(|t| {
            let mut rng = sampling::stream(seed, 92_000 + t as u64);
            let a = sampling::cell_potential(&hier, level, 4.0, &mut rng);
            let b = sampling::cell_potential(&hier, level, 4.0, &mut rng);
            let mid_vals: Vec<f64> = a
                .values()
                .iter()
                .zip(b.values())
                .map(|(x, y)| 0.5 * (x + y))
                .collect();
            let mid = Potential::new(&hier, level, mid_vals).expect("same level");
            let slack =
                ground_energy(&spec, &mid)? - 0.5 * (ground_energy(&spec, &a)? + ground_energy(&spec, &b)?);
            Ok::<_, SuiteError>((t, slack))
        })
        .collect::<Result<_, _>>()?;
    let mut concavity_table = Table::new("energy_concavity", &["triple", "midpoint_slack"]);
    let mut worst_concavity = f64::INFINITY;
    for (t, s) in &concavity_rows {
        worst_concavity = worst_concavity.min(*s);
        concavity_table.push(vec![fi(*t as i64), ff(*s)]);
    }

    // Midpoint convexity of the functional, re-using the tight F values.
    let convexity_rows: Vec<(usize, usize, f64)> = (0..100usize)
        .into_par_iter()
        .map(|t| {
            let mut rng = sampling::stream(seed, 93_000 + t as u64);
            let i = rng.random_range(0..n_rho);
            let j = (i + rng.random_range(1..n_rho)) % n_rho;
            let (ri, fi_val) = &densities[i];
            let (rj, fj_val) = &densities[j];
            let mid_avg: Vec<f64> = ri
                .averages()
                .iter()
                .zip(rj.averages())
                .map(|(x, y)| 0.5 * (x + y))
                .collect();
            let mid = CoarseDensity::new(&hier, level, mid_avg, 1)?;
            let fm = lieb_maximize(&spec, &mid, &AscentOptions::tight())?.f_value;
            Ok::<_, SuiteError>((i, j, fm - 0.5 * (fi_val + fj_val)))
        })
        .collect::<Result<_, _>>()?;
    let mut convexity_table =
        Table::new("functional_convexity", &["density_a", "density_b", "midpoint_slack"]);
    let mut worst_convexity = f64::NEG_INFINITY;
    for (i, j, s) in &convexity_rows {
        worst_convexity = worst_convexity.max(*s);
        convexity_table.push(vec![fi(*i as i64), fi(*j as i64), ff(*s)]);
    }

    let passed = fy_violations == 0
        && excess_ok
        && worst_concavity >= -tols.convexity_slack
        && worst_convexity <= tols.convexity_slack;
    let detail = format!(
        "500 pairs: {fy_violations} bound violations, smallest excess {worst_excess:.2e} (floor -{:.0e}); concavity slack {worst_concavity:.2e}, convexity slack {worst_convexity:.2e} (cap {:.0e})",
        tols.excess_floor, tols.convexity_slack
    );
    Ok((
        passed,
        detail,
        vec![pair_table, concavity_table, convexity_table],
    ))
}

/// Criterion 10: the decomposition of the functional into kinetic,
/// mean-field and correlation parts closes exactly, the mean-field term
/// differentiates to its potential, and the correlation direction matches
/// the correlation potential pairing.
/// Finite-difference cell response of the fine ground density to cell
/// potential bumps around a converged inversion. One eigensolve per cell;
/// the result is only used to construct Newton-quality warm starts, so
/// first-order accuracy in the bump size is plenty.
fn fd_cell_response(
    spec: &ModelSpec,
    base_v: &Potential,
    base_averages: &[f64],
    eps: f64,
) -> Result<nalgebra::DMatrix<f64>, SuiteError> {
    let hier = spec.hierarchy();
    let level = base_v.level();
    let k = hier.cell_count(level);
    let mut chi = nalgebra::DMatrix::<f64>::zeros(k, k);
    for c in 0..k {
        let mut cells = base_v.values().to_vec();
        cells[c] += eps;
        let bumped = Potential::new(&hier, level, cells)?;
        let rho = forward_density(spec, &bumped.embed_values())?;
        let averages = hier.project(&rho, level)?.averages().to_vec();
        for r in 0..k {
            chi[(r, c)] = (averages[r] - base_averages[r]) / eps;
        }
    }
    Ok(chi)
}

/// Invert `target` by Newton iteration with the frozen response `chi`,
/// then certify the endpoint with a warm-started ascent. The manual loop
/// only manufactures a good initial potential; the returned result is the
/// ascent's own converged, gauge-fixed inversion.
fn newton_warmed_invert(
    spec: &ModelSpec,
    hier: &crate::grid::ScaleHierarchy,
    base_v: &Potential,
    chi: &nalgebra::DMatrix<f64>,
    target: &CoarseDensity,
) -> Result<InversionResult, SuiteError> {
    let level = base_v.level();
    let tol = tolerances::RESIDUAL_DEFAULT;
    let w = hier.cell_width(level);
    let mut cells = base_v.values().to_vec();
    let svd = chi.clone().svd(true, true);
    for _ in 0..6 {
        let pot = Potential::new(hier, level, cells.clone())?;
        let rho = forward_density(spec, &pot.embed_values())?;
        let averages = hier.project(&rho, level)?.averages().to_vec();
        let residual: f64 = averages
            .iter()
            .zip(target.averages())
            .map(|(a, t)| (a - t).abs() * w)
            .sum();
        if residual <= 0.3 * tol {
            break;
        }
        let mismatch = nalgebra::DVector::from_iterator(
            averages.len(),
            target.averages().iter().zip(&averages).map(|(t, a)| t - a),
        );
        let update = svd
            .solve(&mismatch, 1e-10)
            .map_err(|e| SuiteError::Config(format!("response solve failed: {e}")))?;
        for (v, u) in cells.iter_mut().zip(update.iter()) {
            *v += u;
        }
    }
    let opts = AscentOptions::default().with_initial(Potential::new(hier, level, cells)?);
    Ok(lieb_maximize(spec, target, &opts)?)
}

fn kohn_sham_closure(
    model: &ModelSection,
    seed: u64,
    tols: &ToleranceSet,
) -> Result<Verdict, SuiteError> {
    let spec2 = spec_for(model, 2)?;
    let hier = spec2.hierarchy();
    let w = hier.cell_width(2);
    let cells = hier.cell_count(2);

    // Exact decomposition identities on two densities, one per level. The
    // identities hold by construction at any solver depth, so the default
    // residual target suffices; the interacting pair solves dominate the
    // cost either way.
    let reports: Vec<(usize, kohn_sham::KsReport)> = [(0usize, 1usize), (1, 2)]
        .par_iter()
        .map(|&(k, level)| {
            let mut rng = sampling::stream(seed, 100_000 + k as u64);
            let rho = sampling::interior_density(&hier, level, 2, 0.25, &mut rng);
            let rep = kohn_sham::ks_decompose(&spec2, &rho, &AscentOptions::default())?;
            Ok::<_, SuiteError>((k, rep))
        })
        .collect::<Result<_, _>>()?;
    let mut id_table = Table::new(
        "ks_identities",
        &["density", "level", "f", "t_s", "e_h", "e_xc", "energy_defect", "potential_defect"],
    );
    let mut worst_identity = 0.0f64;
    for (k, rep) in &reports {
        let e_defect = (rep.f - (rep.t_s + rep.e_h + rep.e_xc)).abs();
        let p_defect = rep
            .v_s
            .values()
            .iter()
            .zip(rep.v.values())
            .zip(rep.phi.values().iter().zip(rep.v_xc.values()))
            .map(|((s, v), (p, xc))| (s - (v + p + xc)).abs())
            .fold(0.0f64, f64::max);
        worst_identity = worst_identity.max(e_defect).max(p_defect);
        id_table.push(vec![
            fi(*k as i64),
            fi(rep.v.level() as i64),
            ff(rep.f),
            ff(rep.t_s),
            ff(rep.e_h),
            ff(rep.e_xc),
            ff(e_defect),
            ff(p_defect),
        ]);
    }
    let identities_ok = worst_identity <= tols.ks_identity;

    // The level-2 decomposition doubles as the base point for both
    // derivative checks.
    let base_rep = &reports.iter().find(|(k, _)| *k == 1).unwrap().1;
    let rho = base_rep.interacting.target.clone();

    // Quadratic-remainder check of the mean-field derivative.
    let mut rng = sampling::stream(seed, 101_000);
    let delta = sampling::direction(cells, w, &mut rng);
    let e0 = kohn_sham::hartree_energy(&spec2, 2, rho.averages())?;
    let pairing: f64 = base_rep
        .phi
        .values()
        .iter()
        .zip(&delta)
        .map(|(p, d)| p * d * w)
        .sum();
    let mut coeffs = Vec::new();
    for t in [1e-2, 1e-3] {
        let moved: Vec<f64> = rho
            .averages()
            .iter()
            .zip(&delta)
            .map(|(a, d)| a + t * d)
            .collect();
        let et = kohn_sham::hartree_energy(&spec2, 2, &moved)?;
        coeffs.push((et - e0 - t * pairing) / (t * t));
    }
    let form = kohn_sham::hartree_energy(&spec2, 2, &delta)?;
    let hartree_spread = (coeffs[0] / coeffs[1] - 1.0).abs();
    let hartree_form_err = (coeffs[0] - form).abs() / (1.0 + form.abs());
    let hartree_ok = hartree_spread <= tols.hartree_rel && hartree_form_err <= tols.hartree_rel;
    let mut hart_table = Table::new(
        "hartree_derivative",
        &["step", "remainder_coefficient", "quadratic_form"],
    );
    for (t, c) in [1e-2, 1e-3].iter().zip(&coeffs) {
        hart_table.push(vec![ff(*t), ff(*c), ff(form)]);
    }

    // Correlation direction against the correlation potential pairing. Each
    // one-sided quotient limit comes from two warm-started solves and one
    // Richardson step (the s1 = 4 s2 combination cancels the first-order
    // bias of the quotient).
    let spec2_free = spec2.noninteracting();
    let steps = [1.0 / 64.0, 1.0 / 256.0];
    // Interacting quotient points are expensive pair inversions; a frozen
    // Newton map built from one finite-difference response around the base
    // turns each into a couple of eigensolves plus a certifying ascent.
    let base_averages = hier
        .project(&base_rep.interacting.lambda_density, 2)?
        .averages()
        .to_vec();
    let chi = fd_cell_response(&spec2, &base_rep.v, &base_averages, 1e-2)?;
    let interacting_limit = |delta: &[f64]| {
        let mut q = [0.0f64; 2];
        for (i, &step) in steps.iter().enumerate() {
            let moved = rho.displaced(delta, step)?;
            let fs = newton_warmed_invert(&spec2, &hier, &base_rep.v, &chi, &moved)?.f_value;
            q[i] = (fs - base_rep.f) / step;
        }
        Ok::<_, SuiteError>((4.0 * q[1] - q[0]) / 3.0)
    };
    let free_limit = |delta: &[f64]| {
        let mut q = [0.0f64; 2];
        for (i, &step) in steps.iter().enumerate() {
            let moved = rho.displaced(delta, step)?;
            let opts = AscentOptions::default().with_initial(base_rep.v_s.clone());
            let fs = lieb_maximize(&spec2_free, &moved, &opts)?.f_value;
            q[i] = (fs - base_rep.t_s) / step;
        }
        Ok::<_, SuiteError>((4.0 * q[1] - q[0]) / 3.0)
    };
    let xc_rows: Vec<(usize, f64, f64)> = (0..10usize)
        .into_par_iter()
        .map(|d| {
            let mut rng = sampling::stream(seed, 102_000 + d as u64);
            let delta = sampling::direction(cells, w, &mut rng);
            let df = interacting_limit(&delta)?;
            let dts = free_limit(&delta)?;
            let phi_pair: f64 = base_rep
                .phi
                .values()
                .iter()
                .zip(&delta)
                .map(|(p, x)| p * x * w)
                .sum();
            let measured = df - dts - phi_pair;
            let predicted: f64 = base_rep
                .v_xc
                .values()
                .iter()
                .zip(&delta)
                .map(|(p, x)| p * x * w)
                .sum();
            Ok::<_, SuiteError>((d, measured, predicted))
        })
        .collect::<Result<_, _>>()?;
    let mut xc_table =
        Table::new("xc_direction", &["direction", "measured", "predicted", "rel_err"]);
    let mut worst_xc = 0.0f64;
    for (d, measured, predicted) in &xc_rows {
        let rel = (measured - predicted).abs() / (1.0 + predicted.abs());
        worst_xc = worst_xc.max(rel);
        xc_table.push(vec![fi(*d as i64), ff(*measured), ff(*predicted), ff(rel)]);
    }
    let xc_ok = worst_xc <= tols.xc_rel;

    let passed = identities_ok && hartree_ok && xc_ok;
    let detail = format!(
        "identities to {worst_identity:.1e} (cap {:.0e}); mean-field remainder spread {hartree_spread:.2e}, form error {hartree_form_err:.2e} (cap {:.0e}); worst correlation-direction error {worst_xc:.2e} (cap {:.0e})",
        tols.ks_identity, tols.hartree_rel, tols.xc_rel
    );
    Ok((passed, detail, vec![id_table, hart_table, xc_table]))
}

/// Criterion 11: the two blow-up mechanisms. A density with a regularized
/// node drives the potential norms up geometrically; oscillatory probes
/// pair linearly in the wavelength and cannot move the density.
fn blowup_demonstrations(
    model: &ModelSection,
    seed: u64,
    tols: &ToleranceSet,
) -> Result<Verdict, SuiteError> {
    let spec = spec_for(model, 1)?;
    let grid = spec.grid();
    let hier = spec.hierarchy();
    let _ = seed; // both demonstrations are deterministic constructions

    // Node probe: quadratic node at the center, regularized.
    let node = node_density(&spec)?;
    let levels: Vec<usize> = (2..=6usize.min(hier.deepest_level())).collect();
    let verdict = multiscale::representability_probe(&spec, &node, &levels, 50.0)?;
    let mut node_table = Table::new(
        "node_probe",
        &["level", "v_sup", "f_n", "converged", "residual"],
    );
    for row in &verdict.sweep.rows {
        node_table.push(vec![
            fi(row.level as i64),
            ff(row.v_sup),
            ff(row.f_n),
            fi(row.converged as i64),
            ff(row.residual),
        ]);
    }
    let node_ok = verdict.kind == ProbeKind::Blowup;

    // Oscillation table on a wall-compatible base.
    let fine = smooth_ground_density(&spec, 2.0, 1.0)?;
    let rho0 = hier.project(&fine, hier.deepest_level())?;
    let h = grid.spacing();
    let ells: Vec<f64> = [0.1, 0.075, 0.056, 0.042, 0.032]
        .iter()
        .map(|&e| e * grid.length())
        .filter(|&e| e >= 4.0 * h)
        .collect();
    let amplitude = 10.0;
    let report = multiscale::oscillation_blowup(&spec, &rho0, amplitude, &ells)?;
    let mut osc_table = Table::new(
        "oscillation",
        &["ell", "pairing", "bound", "harvest", "witness_cost", "w_sup", "drift_l1", "e_perturbed"],
    );
    let mut bound_ok = true;
    for r in &report.rows {
        bound_ok &= r.pairing.abs() <= r.bound;
        osc_table.push(vec![
            ff(r.ell),
            ff(r.pairing),
            ff(r.bound),
            ff(r.harvest),
            ff(r.witness_cost),
            ff(r.w_sup),
            ff(r.drift_l1),
            ff(r.e_perturbed),
        ]);
    }
    let exponent = report
        .harvest_fit
        .as_ref()
        .map(|f| f.exponent)
        .unwrap_or(f64::NAN);
    let exponent_ok =
        exponent >= tols.exponent_low && exponent <= tols.exponent_high;
    let drift = report.rows.last().map(|r| r.drift_l1).unwrap_or(f64::NAN);
    let drift_ok = drift <= tols.drift_factor * spec.particles() as f64;

    let passed = node_ok && bound_ok && exponent_ok && drift_ok;
    let detail = format!(
        "node verdict {:?} (want blowup); pairing exponent {exponent:.3} (band [{}, {}]); drift {drift:.2e} at ell {:.3} (cap {:.0e})",
        verdict.kind,
        tols.exponent_low,
        tols.exponent_high,
        ells.last().copied().unwrap_or(f64::NAN),
        tols.drift_factor * spec.particles() as f64
    );
    Ok((passed, detail, vec![node_table, osc_table]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk() -> ModelSection {
        ModelSection::default()
    }

    #[test]
    fn criterion_indices_are_guarded() {
        let err = run_criterion(0, &desk(), 1, &ToleranceSet::default()).unwrap_err();
        assert!(matches!(err, SuiteError::BadIndex(0)));
        let err = run_criterion(12, &desk(), 1, &ToleranceSet::default()).unwrap_err();
        assert!(matches!(err, SuiteError::BadIndex(12)));
    }

    #[test]
    fn one_particle_identity_runs_and_passes() {
        let out = run_criterion(2, &desk(), 7, &ToleranceSet::default()).unwrap();
        assert!(out.passed, "{}", out.detail);
        assert_eq!(out.tables.len(), 1);
        assert_eq!(out.tables[0].rows.len(), 20);
        assert!(out.line().starts_with("PASS  2."));
    }

    #[test]
    fn criterion_artifacts_are_reproducible() {
        // The cheapest criterion twice with the same seed: identical bytes.
        let a = run_criterion(2, &desk(), 3, &ToleranceSet::default()).unwrap();
        let b = run_criterion(2, &desk(), 3, &ToleranceSet::default()).unwrap();
        assert_eq!(a.tables[0].to_csv(), b.tables[0].to_csv());
        // And a different seed really changes the data.
        let c = run_criterion(2, &desk(), 4, &ToleranceSet::default()).unwrap();
        assert_ne!(a.tables[0].to_csv(), c.tables[0].to_csv());
    }

    #[test]
    fn tightened_tolerance_can_fail_a_criterion() {
        let mut tols = ToleranceSet::default();
        // No solver reaches a relative gap of 1e-30; the verdict must flip
        // rather than the measurement bending to the threshold.
        tols.set("one_particle_rel", 1e-30).unwrap();
        let out = run_criterion(2, &desk(), 7, &tols).unwrap();
        assert!(!out.passed);
        assert!(out.line().starts_with("FAIL"));
    }

    #[test]
    fn smooth_ground_densities_vanish_at_the_walls() {
        let spec = spec_for(&desk(), 1).unwrap();
        let mut rng = sampling::stream(1, 0);
        let amp: f64 = rng.random_range(1.0..5.0);
        let rho = smooth_ground_density(&spec, amp, 0.7).unwrap();
        let vals = rho.values();
        let peak = vals.iter().cloned().fold(0.0f64, f64::max);
        assert!(vals[0] < 0.01 * peak);
        assert!(vals[vals.len() - 1] < 0.01 * peak);
    }

    #[test]
    fn warm_tight_inversion_reaches_tight_residual() {
        let spec = spec_for(&desk(), 1).unwrap();
        let fine = smooth_ground_density(&spec, 3.0, 0.4).unwrap();
        let inv = warm_tight_invert(&spec, &fine, 4).unwrap();
        assert!(inv.converged);
        assert!(inv.residual <= tolerances::RESIDUAL_TIGHT);
    }
}
