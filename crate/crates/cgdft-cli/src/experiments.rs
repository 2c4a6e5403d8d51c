//! One function per experiment, each mapping a resolved config to named
//! pass/fail checks plus CSV/JSON artifacts. The heavy numerics live in the
//! library; this module only chooses fixtures, applies defaults for
//! parameters the config left empty, and asserts the experiment's
//! invariants at the configured tolerances.

use serde::Serialize;
use serde_json::json;

use cgdft::config::{Experiment, ProbeTarget, RunConfig, ToleranceSet};
use cgdft::density::FineDensity;
use cgdft::duality::{lieb_maximize, AscentOptions};
use cgdft::io::{format_float as ff, format_int as fi, Table};
use cgdft::kohn_sham;
use cgdft::multiscale::{self, ProbeKind};
use cgdft::sampling;
use cgdft::suite::{self, SuiteError};

/// A single named invariant of an experiment.
#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Check {
            name: name.to_string(),
            passed,
            detail,
        }
    }

    pub fn line(&self) -> String {
        format!(
            "{}  {}  {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail
        )
    }
}

/// Everything a finished experiment hands back to the runner.
pub struct ExperimentRun {
    pub checks: Vec<Check>,
    pub tables: Vec<Table>,
    pub json: Vec<(String, serde_json::Value)>,
}

/// Cross-field semantic checks that couple experiment parameters to the
/// model (levels inside the hierarchy, wavelengths resolvable on the grid).
/// Failing here is a config rejection: nothing has been written yet.
pub fn preflight(cfg: &RunConfig) -> Result<(), SuiteError> {
    let spec = cfg
        .to_spec()
        .map_err(|e| SuiteError::Config(e.to_string()))?;
    let hier = spec.hierarchy();
    let deepest = hier.deepest_level();
    let bad_level = |l: usize| SuiteError::Config(format!(
        "level {l} outside hierarchy 1..={deepest} for {} grid points",
        spec.grid().points()
    ));
    match cfg.experiment {
        Experiment::Invert | Experiment::Quasi | Experiment::Modulus | Experiment::Ks => {
            if cfg.params.level > deepest {
                return Err(bad_level(cfg.params.level));
            }
        }
        Experiment::Sweep | Experiment::Probe => {
            if let Some(&top) = cfg.params.levels.last() {
                if top > deepest {
                    return Err(bad_level(top));
                }
            }
        }
        Experiment::Blowup => {
            let limit = 4.0 * spec.grid().spacing();
            for &ell in &cfg.params.wavelengths {
                if ell < limit {
                    return Err(SuiteError::Config(format!(
                        "wavelength {ell} below the grid resolution limit {limit}"
                    )));
                }
            }
            if let Some(&top) = cfg.params.levels.last() {
                if top > deepest {
                    return Err(bad_level(top));
                }
            }
        }
        Experiment::VerifyAll => {
            // The battery's fixed ladders and wavelength schedule need a
            // grid at least this deep.
            if deepest < 6 {
                return Err(SuiteError::Config(format!(
                    "the acceptance battery needs at least 64 grid points, got {}",
                    spec.grid().points()
                )));
            }
        }
    }
    Ok(())
}

pub fn execute(cfg: &RunConfig, tols: &ToleranceSet) -> Result<ExperimentRun, SuiteError> {
    match cfg.experiment {
        Experiment::Invert => invert(cfg, tols),
        Experiment::Sweep => sweep(cfg, tols),
        Experiment::Probe => probe(cfg, tols),
        Experiment::Quasi => quasi(cfg, tols),
        Experiment::Modulus => modulus(cfg, tols),
        Experiment::Blowup => blowup(cfg, tols),
        Experiment::Ks => ks(cfg, tols),
        Experiment::VerifyAll => verify_all(cfg, tols),
    }
}

fn spec_of(cfg: &RunConfig) -> Result<cgdft::ModelSpec, SuiteError> {
    cfg.to_spec().map_err(|e| SuiteError::Config(e.to_string()))
}

/// Levels to sweep: the configured ladder, or every level down to the grid.
fn sweep_levels(cfg: &RunConfig, deepest: usize) -> Vec<usize> {
    if cfg.params.levels.is_empty() {
        (1..=deepest).collect()
    } else {
        cfg.params.levels.clone()
    }
}

/// Levels for representability probes: the configured ladder, or 2..=6.
fn probe_levels(cfg: &RunConfig, deepest: usize) -> Vec<usize> {
    if cfg.params.levels.is_empty() {
        (2..=6usize.min(deepest)).collect()
    } else {
        cfg.params.levels.clone()
    }
}

/// Invert the projection of a forward-generated fine density at one level
/// and require the residual and gauge targets to certify the fixed point.
fn invert(cfg: &RunConfig, tols: &ToleranceSet) -> Result<ExperimentRun, SuiteError> {
    let spec = spec_of(cfg)?;
    let hier = spec.hierarchy();
    let level = cfg.params.level;
    let fine = suite::smooth_ground_density(&spec, cfg.params.amplitude, cfg.params.phase)?;
    let rho = hier.project(&fine, level)?;
    let opts = AscentOptions {
        tol: Some(tols.residual_l1),
        gauge_tol: Some(tols.gauge_abs),
        ..AscentOptions::default()
    };
    let result = lieb_maximize(&spec, &rho, &opts)?;

    let recovered = hier.project(&result.lambda_density, level)?;
    let mut table = Table::new("inversion", &["cell", "target", "recovered", "potential"]);
    for (i, ((t, r), v)) in rho
        .averages()
        .iter()
        .zip(recovered.averages())
        .zip(result.potential.values())
        .enumerate()
    {
        table.push(vec![fi(i as i64), ff(*t), ff(*r), ff(*v)]);
    }

    let checks = vec![
        Check::new(
            "inversion-residual",
            result.converged && result.residual <= tols.residual_l1,
            format!(
                "level {level}: residual {:.3e} (cap {:.0e}) in {} iterations",
                result.residual, tols.residual_l1, result.iterations
            ),
        ),
        Check::new(
            "gauge",
            result.gauge_residual.abs() <= tols.gauge_abs,
            format!(
                "|E[v[rho]]| = {:.3e} (cap {:.0e})",
                result.gauge_residual.abs(),
                tols.gauge_abs
            ),
        ),
    ];
    let json = vec![(
        "inversion".to_string(),
        serde_json::to_value(&result).expect("inversion result serializes"),
    )];
    Ok(ExperimentRun {
        checks,
        tables: vec![table],
        json,
    })
}

/// Sweep the coarse intrinsic energy across levels: the sequence must be
/// non-decreasing, every inversion must converge, and when the ladder
/// reaches the grid the last coarse value must sit within the configured
/// relative gap of the grid value.
fn sweep(cfg: &RunConfig, tols: &ToleranceSet) -> Result<ExperimentRun, SuiteError> {
    let spec = spec_of(cfg)?;
    let hier = spec.hierarchy();
    let deepest = hier.deepest_level();
    let levels = sweep_levels(cfg, deepest);
    let fine = suite::smooth_ground_density(&spec, cfg.params.amplitude, cfg.params.phase)?;
    let sweep = multiscale::scale_sweep(&spec, &fine, &levels)?;

    let mut table = Table::new(
        "sweep",
        &[
            "level",
            "diameter",
            "f_n",
            "dist_1",
            "dist_2",
            "lambda_dist_1",
            "lambda_dist_2",
            "v_sup",
            "residual",
            "monotone",
        ],
    );
    let mut prev_f: Option<f64> = None;
    for row in &sweep.rows {
        let mono = match prev_f {
            Some(p) if row.f_n < p - tols.monotone_slack => "DROP",
            _ => "OK",
        };
        prev_f = Some(row.f_n);
        table.push(vec![
            fi(row.level as i64),
            ff(row.diameter),
            ff(row.f_n),
            ff(row.dist_1),
            ff(row.dist_2),
            ff(row.lambda_dist_1),
            ff(row.lambda_dist_2),
            ff(row.v_sup),
            ff(row.residual),
            mono.to_string(),
        ]);
    }

    let mut checks = vec![
        Check::new(
            "converged",
            sweep.rows.iter().all(|r| r.converged),
            format!("{} levels inverted", sweep.rows.len()),
        ),
        Check::new(
            "monotone",
            sweep.monotone_violation <= tols.monotone_slack,
            format!(
                "largest drop {:.3e} (cap {:.0e})",
                sweep.monotone_violation, tols.monotone_slack
            ),
        ),
    ];
    if levels.len() >= 2 && *levels.last().unwrap() == deepest {
        let coarse = sweep.rows[sweep.rows.len() - 2].f_n;
        let gap = (sweep.f_deepest - coarse) / sweep.f_deepest.abs().max(f64::MIN_POSITIVE);
        checks.push(Check::new(
            "grid-gap",
            gap.abs() <= tols.gap_rel,
            format!(
                "last coarse level within {:.4}% of the grid value (cap {}%)",
                100.0 * gap.abs(),
                100.0 * tols.gap_rel
            ),
        ));
    }
    let json = vec![(
        "sweep_fits".to_string(),
        json!({
            "monotone_violation": sweep.monotone_violation,
            "f_deepest": sweep.f_deepest,
            "dist1_fit": sweep.dist1_fit,
            "vsup_fit": sweep.vsup_fit,
        }),
    )];
    Ok(ExperimentRun {
        checks,
        tables: vec![table],
        json,
    })
}

/// Probe a target density for representability and require the verdict the
/// target was constructed to produce: pinched or wall-incompatible
/// densities must read as blow-up, forward-generated ones as representable.
fn probe(cfg: &RunConfig, _tols: &ToleranceSet) -> Result<ExperimentRun, SuiteError> {
    let spec = spec_of(cfg)?;
    let hier = spec.hierarchy();
    let levels = probe_levels(cfg, hier.deepest_level());
    let (fine, expected, target_name) = match cfg.params.probe_target {
        ProbeTarget::Node => (suite::node_density(&spec)?, ProbeKind::Blowup, "node"),
        ProbeTarget::Uniform => (
            FineDensity::from_unnormalized(
                spec.grid(),
                vec![1.0; spec.grid().points()],
                spec.particles(),
            )?,
            ProbeKind::Blowup,
            "uniform",
        ),
        ProbeTarget::Forward => (
            suite::smooth_ground_density(&spec, cfg.params.amplitude, cfg.params.phase)?,
            ProbeKind::Representable,
            "forward",
        ),
    };
    let verdict = multiscale::representability_probe(&spec, &fine, &levels, cfg.params.v_cap)?;

    let mut table = Table::new(
        "probe",
        &["level", "diameter", "f_n", "v_sup", "residual", "converged"],
    );
    for row in &verdict.sweep.rows {
        table.push(vec![
            fi(row.level as i64),
            ff(row.diameter),
            ff(row.f_n),
            ff(row.v_sup),
            ff(row.residual),
            fi(row.converged as i64),
        ]);
    }
    let checks = vec![Check::new(
        "probe-verdict",
        verdict.kind == expected,
        format!(
            "{target_name} target read as {:?} (expected {expected:?}, cap {})",
            verdict.kind, verdict.v_cap
        ),
    )];
    let json = vec![(
        "probe_verdict".to_string(),
        json!({
            "target": target_name,
            "kind": verdict.kind,
            "expected": expected,
            "v_cap": verdict.v_cap,
            "window_sup_diffs": verdict.window_sup_diffs,
        }),
    )];
    Ok(ExperimentRun {
        checks,
        tables: vec![table],
        json,
    })
}

/// Default radius schedule for the quasi-continuity probe: twenty
/// log-spaced radii from 1e-1 down to 1e-3.
fn quasi_radii(cfg: &RunConfig) -> Vec<f64> {
    if cfg.params.radii.is_empty() {
        (0..20)
            .map(|i| 10f64.powf(-1.0 - 2.0 * i as f64 / 19.0))
            .collect()
    } else {
        cfg.params.radii.clone()
    }
}

/// Sample the continuity of the product map around the projected box ground
/// state; the worst product move must decrease strictly with the radius.
fn quasi(cfg: &RunConfig, tols: &ToleranceSet) -> Result<ExperimentRun, SuiteError> {
    let spec = spec_of(cfg)?;
    let hier = spec.hierarchy();
    let base = suite::forward_density(&spec, &vec![0.0; spec.grid().points()])?;
    let rho = hier.project(&base, cfg.params.level)?;
    let radii = quasi_radii(cfg);
    let rows =
        multiscale::quasi_continuity_probe(&spec, &rho, &radii, cfg.params.samples, cfg.seed)?;

    let mut table = Table::new(
        "quasi_continuity",
        &[
            "radius",
            "samples",
            "failures",
            "max_product_l1",
            "mean_product_l1",
            "max_window_sup",
        ],
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
    let checks = vec![
        Check::new(
            "strictly-decreasing",
            strictly_decreasing && no_failures,
            format!("{} radii, worst product move strictly decreasing", rows.len()),
        ),
        Check::new(
            "contraction-ratio",
            ratio <= tols.quasi_ratio,
            format!("last/first = {ratio:.3e} (cap {:.0e})", tols.quasi_ratio),
        ),
    ];
    Ok(ExperimentRun {
        checks,
        tables: vec![table],
        json: vec![],
    })
}

/// Default radius schedule for the continuity modulus, ending at the
/// per-particle floor radius the acceptance gate checks.
fn modulus_radii(cfg: &RunConfig, particles: f64) -> Vec<f64> {
    if cfg.params.radii.is_empty() {
        vec![1e-2, 1e-3, 1e-4, 1e-6 * particles]
    } else {
        cfg.params.radii.clone()
    }
}

/// Measure how far the intrinsic energy can move under perturbations of a
/// given mass, in both sampling modes; the modulus must shrink with the
/// radius and be negligible at the floor radius.
fn modulus(cfg: &RunConfig, tols: &ToleranceSet) -> Result<ExperimentRun, SuiteError> {
    let spec = spec_of(cfg)?;
    let hier = spec.hierarchy();
    let base = suite::forward_density(&spec, &vec![0.0; spec.grid().points()])?;
    let rho = hier.project(&base, cfg.params.level)?;
    let radii = modulus_radii(cfg, spec.particles() as f64);
    let report =
        multiscale::continuity_modulus(&spec, &rho, &radii, cfg.params.samples, cfg.seed)?;

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
    let decreasing = report.rows.windows(2).all(|p| {
        p[1].max_two_sided <= p[0].max_two_sided && p[1].max_downward <= p[0].max_downward
    });
    let last = report.rows.last().unwrap();
    let floor_ok = last.max_two_sided <= tols.modulus_cap && last.max_downward <= tols.modulus_cap;
    let no_failures = report.rows.iter().all(|r| r.failures == 0);
    let checks = vec![
        Check::new(
            "decreasing",
            decreasing && no_failures,
            format!("{} radii, both modes non-increasing", report.rows.len()),
        ),
        Check::new(
            "floor-modulus",
            floor_ok,
            format!(
                "modulus {:.3e} / {:.3e} at radius {:.1e} (cap {:.0e})",
                last.max_two_sided, last.max_downward, last.radius, tols.modulus_cap
            ),
        ),
    ];
    let json = vec![(
        "modulus_base".to_string(),
        json!({ "f_base": report.f_base, "f_ceiling": report.f_ceiling }),
    )];
    Ok(ExperimentRun {
        checks,
        tables: vec![table],
        json,
    })
}

/// Default oscillation wavelengths as fractions of the box, coarsest first.
fn blowup_wavelengths(cfg: &RunConfig, length: f64, limit: f64) -> Vec<f64> {
    if cfg.params.wavelengths.is_empty() {
        [0.1, 0.075, 0.056, 0.042, 0.032]
            .iter()
            .map(|&e| e * length)
            .filter(|&e| e >= limit)
            .collect()
    } else {
        cfg.params.wavelengths.clone()
    }
}

/// Demonstrate the two blow-up mechanisms: a pinched density whose
/// representing potential grows without bound under refinement, and
/// short-wavelength potential oscillations whose extractable pairing decays
/// linearly with the wavelength, leaving the coarse density unmoved.
fn blowup(cfg: &RunConfig, tols: &ToleranceSet) -> Result<ExperimentRun, SuiteError> {
    let spec = spec_of(cfg)?;
    let grid = spec.grid();
    let hier = spec.hierarchy();

    let node = suite::node_density(&spec)?;
    let levels = probe_levels(cfg, hier.deepest_level());
    let verdict = multiscale::representability_probe(&spec, &node, &levels, cfg.params.v_cap)?;
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

    let fine = suite::smooth_ground_density(&spec, 2.0, 1.0)?;
    let rho0 = hier.project(&fine, hier.deepest_level())?;
    let ells = blowup_wavelengths(cfg, grid.length(), 4.0 * grid.spacing());
    let report =
        multiscale::oscillation_blowup(&spec, &rho0, cfg.params.oscillation_amplitude, &ells)?;
    let mut osc_table = Table::new(
        "oscillation",
        &[
            "ell",
            "pairing",
            "bound",
            "harvest",
            "witness_cost",
            "w_sup",
            "drift_l1",
            "e_perturbed",
        ],
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
    let drift = report.rows.last().map(|r| r.drift_l1).unwrap_or(f64::NAN);
    let n = spec.particles() as f64;

    let checks = vec![
        Check::new(
            "node-blowup",
            verdict.kind == ProbeKind::Blowup,
            format!("pinched density read as {:?} under cap {}", verdict.kind, verdict.v_cap),
        ),
        Check::new(
            "pairing-bound",
            bound_ok,
            "every oscillation pairing under its linear envelope".to_string(),
        ),
        Check::new(
            "harvest-exponent",
            exponent >= tols.exponent_low && exponent <= tols.exponent_high,
            format!(
                "harvest ~ ell^{exponent:.3} (window [{}, {}])",
                tols.exponent_low, tols.exponent_high
            ),
        ),
        Check::new(
            "coarse-drift",
            drift <= tols.drift_factor * n,
            format!(
                "drift {drift:.3e} at smallest wavelength (cap {:.0e})",
                tols.drift_factor * n
            ),
        ),
    ];
    let json = vec![(
        "blowup_summary".to_string(),
        json!({
            "node_verdict": verdict.kind,
            "window_sup_diffs": verdict.window_sup_diffs,
            "oscillation_amplitude": report.amplitude,
            "f_base": report.f_base,
            "v_base_sup": report.v_base_sup,
            "harvest_fit": report.harvest_fit,
        }),
    )];
    Ok(ExperimentRun {
        checks,
        tables: vec![node_table, osc_table],
        json,
    })
}

/// Decompose the intrinsic energy of one random interior density into
/// kinetic, mean-field, and correlation parts; both decomposition
/// identities must hold to the configured precision.
fn ks(cfg: &RunConfig, tols: &ToleranceSet) -> Result<ExperimentRun, SuiteError> {
    let spec = spec_of(cfg)?;
    let hier = spec.hierarchy();
    let mut rng = sampling::stream(cfg.seed, 0);
    let rho = sampling::interior_density(&hier, cfg.params.level, spec.particles(), 0.25, &mut rng);
    let rep = kohn_sham::ks_decompose(&spec, &rho, &AscentOptions::default())?;

    let energy_defect = (rep.f - (rep.t_s + rep.e_h + rep.e_xc)).abs();
    let potential_defect = rep
        .v_s
        .values()
        .iter()
        .zip(rep.v.values())
        .zip(rep.phi.values().iter().zip(rep.v_xc.values()))
        .map(|((s, v), (p, xc))| (s - (v + p + xc)).abs())
        .fold(0.0f64, f64::max);

    let mut table = Table::new("ks_potentials", &["cell", "v", "v_s", "phi", "v_xc"]);
    for (i, ((v, vs), (p, xc))) in rep
        .v
        .values()
        .iter()
        .zip(rep.v_s.values())
        .zip(rep.phi.values().iter().zip(rep.v_xc.values()))
        .enumerate()
    {
        table.push(vec![fi(i as i64), ff(*v), ff(*vs), ff(*p), ff(*xc)]);
    }
    let checks = vec![
        Check::new(
            "energy-identity",
            energy_defect <= tols.ks_identity,
            format!(
                "|F - (T_s + E_H + E_xc)| = {energy_defect:.3e} (cap {:.0e})",
                tols.ks_identity
            ),
        ),
        Check::new(
            "potential-identity",
            potential_defect <= tols.ks_identity,
            format!(
                "sup |v_s - (v + phi + v_xc)| = {potential_defect:.3e} (cap {:.0e})",
                tols.ks_identity
            ),
        ),
    ];
    let json = vec![(
        "ks_energies".to_string(),
        json!({
            "level": cfg.params.level,
            "f": rep.f,
            "t_s": rep.t_s,
            "e_h": rep.e_h,
            "e_xc": rep.e_xc,
        }),
    )];
    Ok(ExperimentRun {
        checks,
        tables: vec![table],
        json,
    })
}

/// Run the whole acceptance battery and surface each criterion as a check.
fn verify_all(cfg: &RunConfig, tols: &ToleranceSet) -> Result<ExperimentRun, SuiteError> {
    let report = suite::verify_all(&cfg.model, cfg.seed, tols)?;
    let mut checks = Vec::new();
    let mut tables = Vec::new();
    let mut outcomes = Vec::new();
    for outcome in report.outcomes {
        checks.push(Check::new(
            outcome.name,
            outcome.passed,
            format!("criterion {}: {}", outcome.index, outcome.detail),
        ));
        outcomes.push(json!({
            "index": outcome.index,
            "name": outcome.name,
            "passed": outcome.passed,
            "detail": outcome.detail,
            "wall_seconds": outcome.wall_seconds,
        }));
        tables.extend(outcome.tables);
    }
    let json = vec![("battery".to_string(), json!({ "criteria": outcomes }))];
    Ok(ExperimentRun {
        checks,
        tables,
        json,
    })
}
