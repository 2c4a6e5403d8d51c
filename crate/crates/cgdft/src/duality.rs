//! The Legendre-Fenchel pair: ground-state energy E[v] as a concave function
//! of the cell potential, the universal functional F as its (pre-)conjugate,
//! and the representing-potential map rho -> v[rho] by concave maximization
//! of G(v) = E[v] - <v, rho>.
//!
//! The supergradient of G at v is the cell-mass mismatch pi(rho_v) - rho, so
//! the ascent is the classical Lieb maximization. Whenever the engine hands
//! back a full spectrum the exact response matrix d(mass)/d(v) is available
//! and the ascent takes damped Newton steps; otherwise it falls back to
//! Barzilai-Borwein quasi-Newton steps with Armijo backtracking. Degenerate
//! ground spaces are handled by mixing basis states with simplex-constrained
//! least-squares weights.
//!
//! Gauge convention: the returned potential is shifted by c = -E[v*]/N so
//! that E[v[rho]] = 0, equivalently F[rho] + <v[rho], rho> = 0.

use crate::density::{CoarseDensity, FineDensity};
use crate::engine::{self, EngineError, EnsembleState, ModelSpec, ResponseSource};
use crate::grid::{ModelError, ScaleHierarchy};
use crate::potential::Potential;
use crate::sampling;
use crate::tolerances;
use nalgebra::DMatrix;
use serde::Serialize;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use thiserror::Error;

/// Cooperative cancellation for long ascents. Clone freely; any clone can
/// cancel the run.
#[derive(Debug, Clone, Default)]
pub struct CancelToken {
    flag: Arc<AtomicBool>,
}

impl CancelToken {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn cancel(&self) {
        self.flag.store(true, Ordering::Relaxed);
    }

    pub fn is_cancelled(&self) -> bool {
        self.flag.load(Ordering::Relaxed)
    }
}

/// Knobs for the dual ascent.
#[derive(Debug, Clone, Default)]
pub struct AscentOptions {
    /// L1 mass residual ||pi(rho_v) - rho||_1 that counts as converged.
    pub tol: Option<f64>,
    /// Bound on |E[v[rho]]| after gauge fixing.
    pub gauge_tol: Option<f64>,
    pub max_iterations: Option<usize>,
    /// Starting potential; must live on the same grid at the density's level
    /// or coarser. Defaults to zero.
    pub initial: Option<Potential>,
    /// Absolute energy window treated as a degenerate ground cluster.
    pub degeneracy_tol: Option<f64>,
    /// Record the per-iteration trace in the result.
    pub keep_trace: bool,
    pub cancel: Option<CancelToken>,
}

impl AscentOptions {
    pub fn tol(&self) -> f64 {
        self.tol.unwrap_or(tolerances::RESIDUAL_DEFAULT)
    }

    pub fn gauge_tol(&self) -> f64 {
        self.gauge_tol.unwrap_or(tolerances::GAUGE_DEFAULT)
    }

    pub fn max_iterations(&self) -> usize {
        self.max_iterations
            .unwrap_or(tolerances::MAX_ITERATIONS_DEFAULT)
    }

    /// Tight variant used wherever the result feeds a small-difference
    /// identity (excess, Fenchel-Young, derivative traces).
    pub fn tight() -> Self {
        AscentOptions {
            tol: Some(tolerances::RESIDUAL_TIGHT),
            max_iterations: Some(2 * tolerances::MAX_ITERATIONS_DEFAULT),
            ..AscentOptions::default()
        }
    }

    pub fn with_initial(mut self, v: Potential) -> Self {
        self.initial = Some(v);
        self
    }

    fn echo(&self, warm_started: bool) -> OptionsEcho {
        OptionsEcho {
            tol: self.tol(),
            gauge_tol: self.gauge_tol(),
            max_iterations: self.max_iterations(),
            degeneracy_tol: self.degeneracy_tol,
            warm_started,
        }
    }
}

/// Serializable echo of the options a result was produced with.
#[derive(Debug, Clone, Serialize)]
pub struct OptionsEcho {
    pub tol: f64,
    pub gauge_tol: f64,
    pub max_iterations: usize,
    pub degeneracy_tol: Option<f64>,
    pub warm_started: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StepMode {
    Newton,
    QuasiNewton,
    Gradient,
}

#[derive(Debug, Clone, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub dual_value: f64,
    pub residual: f64,
    pub step_norm: f64,
    pub mode: StepMode,
}

/// Outcome of one inversion rho -> v[rho].
#[derive(Debug, Clone, Serialize)]
pub struct InversionResult {
    pub level: usize,
    /// F[rho] as the dual value E[v*] - <v*, rho> at the best potential.
    pub f_value: f64,
    /// Gauge-fixed representing potential, E[potential] = 0.
    pub potential: Potential,
    /// Fine-grid ensemble ground-state density of the potential; its
    /// projection reproduces `target` up to `residual`.
    pub lambda_density: FineDensity,
    pub mixing_weights: Vec<f64>,
    /// ||pi(lambda_density) - target||_1 in mass units.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    /// |E[potential]| after the gauge shift; equals |F + <v, rho>|.
    pub gauge_residual: f64,
    pub degeneracy: usize,
    pub ground_gap: f64,
    pub target: CoarseDensity,
    pub trace: Vec<IterationRecord>,
    pub options: OptionsEcho,
}

impl InversionResult {
    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }
}

#[derive(Debug, Error)]
pub enum InversionError {
    #[error("cell {cell} has average {average:.6e}; representing potentials exist only for strictly interior densities")]
    NotInteriorDensity { cell: usize, average: f64 },
    #[error("ascent hit the iteration cap; best residual {:.3e}", .0.residual)]
    NonConvergence(Box<InversionResult>),
    #[error("ascent cancelled after {} iterations; best residual {:.3e}", .0.iterations, .0.residual)]
    Cancelled(Box<InversionResult>),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Ground-state energy E[v] of the assembled Hamiltonian; by the variational
/// split this equals inf over densities of F + <v, rho>.
pub fn ground_energy(spec: &ModelSpec, v: &Potential) -> Result<f64, InversionError> {
    if v.grid() != spec.grid() {
        return Err(ModelError::GridMismatch.into());
    }
    Ok(engine::ground_energy(spec, &v.embed_values())?)
}

/// Cell values replicated onto the fine grid.
fn embed_cells(hier: &ScaleHierarchy, level: usize, cells: &[f64]) -> Vec<f64> {
    let ppc = hier.points_per_cell(level);
    let mut fine = Vec::with_capacity(hier.grid().points());
    for &c in cells {
        fine.extend(std::iter::repeat(c).take(ppc));
    }
    fine
}

/// Project onto the simplex {w >= 0, sum w = 1} (sort-based).
fn project_simplex(w: &mut [f64]) {
    let mut sorted = w.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut acc = 0.0;
    let mut tau = 0.0;
    for (i, &u) in sorted.iter().enumerate() {
        acc += u;
        let t = (acc - 1.0) / (i + 1) as f64;
        if u - t > 0.0 {
            tau = t;
        }
    }
    for x in w.iter_mut() {
        *x = (*x - tau).max(0.0);
    }
}

/// Minimize ||sum_i w_i rows_i - target||_2 over the simplex by projected
/// gradient descent; the problem is a tiny convex QP (k <= degeneracy guard).
pub(crate) fn simplex_least_squares(rows: &[Vec<f64>], target: &[f64]) -> Vec<f64> {
    let k = rows.len();
    if k == 1 {
        return vec![1.0];
    }
    let gram: Vec<Vec<f64>> = rows
        .iter()
        .map(|a| {
            rows.iter()
                .map(|b| a.iter().zip(b).map(|(x, y)| x * y).sum())
                .collect()
        })
        .collect();
    let b: Vec<f64> = rows
        .iter()
        .map(|a| a.iter().zip(target).map(|(x, y)| x * y).sum())
        .collect();
    let lipschitz: f64 = 2.0 * gram.iter().enumerate().map(|(i, r)| r[i]).sum::<f64>();
    let step = 1.0 / lipschitz.max(1e-300);
    let mut w = vec![1.0 / k as f64; k];
    for _ in 0..2000 {
        let mut grad = vec![0.0; k];
        for i in 0..k {
            let gw: f64 = gram[i].iter().zip(&w).map(|(g, x)| g * x).sum();
            grad[i] = 2.0 * (gw - b[i]);
        }
        let mut next = w.clone();
        for i in 0..k {
            next[i] -= step * grad[i];
        }
        project_simplex(&mut next);
        let moved: f64 = next
            .iter()
            .zip(&w)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        w = next;
        if moved < 1e-15 {
            break;
        }
    }
    w
}

/// Exact response matrix chi_RS = d m_R / d v_S from a full spectrum, where
/// m_R is the ground-state mass in cell R and v_S the constant on cell S.
/// Negative semidefinite with the constants in its kernel.
fn response_matrix(
    source: &ResponseSource,
    spec: &ModelSpec,
    level: usize,
) -> DMatrix<f64> {
    let hier = spec.hierarchy();
    let k = hier.cell_count(level);
    let mut chi = DMatrix::<f64>::zeros(k, k);
    let mut add_channel = |t: &[f64], denom: f64| {
        for r in 0..k {
            if t[r] == 0.0 {
                continue;
            }
            for s in 0..k {
                chi[(r, s)] += 2.0 * t[r] * t[s] / denom;
            }
        }
    };
    match source {
        ResponseSource::Orbitals {
            evals,
            evecs,
            occupied,
        } => {
            let scale = evals[evals.len() - 1] - evals[0] + 1.0;
            for &o in occupied {
                for kk in 0..evals.len() {
                    if occupied.contains(&kk) {
                        continue; // occupied-occupied rotations leave the density fixed
                    }
                    let denom = evals[o] - evals[kk];
                    if denom.abs() < 1e-14 * scale {
                        continue;
                    }
                    let mut t = vec![0.0; k];
                    for (i, (&a, &b)) in evecs[o].iter().zip(&evecs[kk]).enumerate() {
                        t[hier.cell_of_point(level, i)] += a * b;
                    }
                    add_channel(&t, denom);
                }
            }
        }
        ResponseSource::Pair { evals, evecs } => {
            let pb = engine::PairBasis::new(spec.grid().points());
            let cell_of: Vec<usize> = (0..spec.grid().points())
                .map(|i| hier.cell_of_point(level, i))
                .collect();
            let scale = evals[evals.len() - 1] - evals[0] + 1.0;
            let ground = &evecs[0];
            for kk in 1..evals.len() {
                let denom = evals[0] - evals[kk];
                if denom.abs() < 1e-14 * scale {
                    continue;
                }
                let mut t = vec![0.0; k];
                for p in 0..pb.dim {
                    let prod = ground[p] * evecs[kk][p];
                    t[cell_of[pb.first[p] as usize]] += prod;
                    t[cell_of[pb.second[p] as usize]] += prod;
                }
                add_channel(&t, denom);
            }
        }
    }
    chi
}

/// One evaluated potential: ground solve, ensemble choice, mismatch.
#[derive(Clone)]
struct Evaluated {
    v: Vec<f64>,
    energy: f64,
    dual: f64,
    grad: Vec<f64>,
    residual: f64,
    state: EnsembleState,
    degeneracy: usize,
    gap: f64,
    response: Option<ResponseSource>,
}

fn evaluate(
    spec: &ModelSpec,
    level: usize,
    v_cells: &[f64],
    target: &[f64],
    deg_tol: Option<f64>,
    warm: &mut Vec<Vec<f64>>,
) -> Result<Evaluated, EngineError> {
    let hier = spec.hierarchy();
    let fine = embed_cells(&hier, level, v_cells);
    let sol = engine::ground_space_warm(spec, &fine, deg_tol, warm)?;
    let space = sol.space;

    let cell_masses = |vec: &Vec<f64>| -> Result<Vec<f64>, EngineError> {
        let state = EnsembleState::pure(vec.clone(), spec.particles())?;
        let rho = spec.density_of(&state)?;
        Ok(hier
            .project(&rho, level)
            .expect("projection of an engine density cannot fail")
            .masses())
    };

    let (state, masses) = if space.degeneracy == 1 {
        let masses = cell_masses(&space.basis[0])?;
        (EnsembleState::pure(space.basis[0].clone(), spec.particles())?, masses)
    } else {
        let rows: Vec<Vec<f64>> = space
            .basis
            .iter()
            .map(cell_masses)
            .collect::<Result<_, _>>()?;
        let weights = simplex_least_squares(&rows, target);
        let mut mixed = vec![0.0; target.len()];
        for (w, row) in weights.iter().zip(&rows) {
            for (m, r) in mixed.iter_mut().zip(row) {
                *m += w * r;
            }
        }
        (
            EnsembleState::new(weights, space.basis.clone(), spec.particles())?,
            mixed,
        )
    };

    *warm = state.vectors().to_vec();
    let grad: Vec<f64> = masses.iter().zip(target).map(|(m, t)| m - t).collect();
    let residual: f64 = grad.iter().map(|g| g.abs()).sum();
    let pairing: f64 = v_cells.iter().zip(target).map(|(v, t)| v * t).sum();
    Ok(Evaluated {
        v: v_cells.to_vec(),
        energy: space.energy,
        dual: space.energy - pairing,
        grad,
        residual,
        state,
        degeneracy: space.degeneracy,
        gap: space.gap,
        response: sol.response,
    })
}

fn mean_anchor(v: &mut [f64]) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    for x in v.iter_mut() {
        *x -= mean;
    }
}

/// Damped Newton direction from the response matrix: solve (-chi) d = grad
/// on the sum-zero subspace (the constant kernel is pinned by a rank-one
/// shift, legitimate because the gradient carries no net mass).
fn newton_direction(chi: &DMatrix<f64>, grad: &[f64]) -> Option<Vec<f64>> {
    let k = grad.len();
    let mut a = -chi.clone();
    let trace: f64 = (0..k).map(|i| a[(i, i)]).sum();
    let mu = 1e-12 * (1.0 + trace / k as f64);
    let sigma = (trace + 1.0e-12) / k as f64;
    for i in 0..k {
        a[(i, i)] += mu;
    }
    for r in 0..k {
        for c in 0..k {
            a[(r, c)] += sigma / k as f64;
        }
    }
    let rhs = nalgebra::DVector::from_column_slice(grad);
    let d = a
        .clone()
        .cholesky()
        .map(|ch| ch.solve(&rhs))
        .or_else(|| a.lu().solve(&rhs))?;
    let mut d: Vec<f64> = d.iter().copied().collect();
    mean_anchor(&mut d);
    Some(d)
}

/// Invert a strictly interior coarse density to its representing potential
/// by maximizing the concave dual G(v) = E[v] - <v, rho>.
pub fn lieb_maximize(
    spec: &ModelSpec,
    rho: &CoarseDensity,
    opts: &AscentOptions,
) -> Result<InversionResult, InversionError> {
    if rho.grid() != spec.grid() {
        return Err(ModelError::GridMismatch.into());
    }
    if rho.particles() != spec.particles() {
        return Err(ModelError::BadParticles(rho.particles()).into());
    }
    if let Some(cell) = rho.averages().iter().position(|&a| a <= 0.0) {
        return Err(InversionError::NotInteriorDensity {
            cell,
            average: rho.averages()[cell],
        });
    }
    let level = rho.level();
    let hier = spec.hierarchy();
    let k = hier.cell_count(level);
    let target = rho.masses();
    let tol = opts.tol();
    let max_iterations = opts.max_iterations();

    let mut v0 = match &opts.initial {
        Some(p) => {
            if p.grid() != spec.grid() {
                return Err(ModelError::GridMismatch.into());
            }
            p.refine_to(level)?.values().to_vec()
        }
        None => vec![0.0; k],
    };
    mean_anchor(&mut v0);

    let mut warm: Vec<Vec<f64>> = Vec::new();
    let mut cur = evaluate(spec, level, &v0, &target, opts.degeneracy_tol, &mut warm)?;
    let mut best = cur.clone();
    let mut trace: Vec<IterationRecord> = Vec::new();
    let mut iterations = 0usize;
    let mut prev: Option<(Vec<f64>, Vec<f64>)> = None; // (v, grad) of last accepted point
    let mut last_alpha = 1.0f64;
    let mut since_best = 0usize;
    let converged;

    loop {
        if cur.residual <= tol {
            converged = true;
            break;
        }
        if iterations >= max_iterations || since_best >= tolerances::ASCENT_STALL_LIMIT {
            converged = false;
            break;
        }
        if let Some(token) = &opts.cancel {
            if token.is_cancelled() {
                let result =
                    assemble(spec, rho, &best, iterations, false, trace, opts, &mut warm)?;
                return Err(InversionError::Cancelled(Box::new(result)));
            }
        }
        iterations += 1;

        // direction
        let mut grad_dir = cur.grad.clone();
        mean_anchor(&mut grad_dir);
        let (dir, mode, mut alpha) = match (&cur.response, cur.degeneracy) {
            (Some(resp), 1) => {
                let chi = response_matrix(resp, spec, level);
                match newton_direction(&chi, &cur.grad) {
                    Some(d) => {
                        let slope: f64 = d.iter().zip(&cur.grad).map(|(a, b)| a * b).sum();
                        if slope > 0.0 {
                            (d, StepMode::Newton, 1.0)
                        } else {
                            (grad_dir.clone(), StepMode::Gradient, last_alpha)
                        }
                    }
                    None => (grad_dir.clone(), StepMode::Gradient, last_alpha),
                }
            }
            _ => match &prev {
                Some((pv, pg)) => {
                    let s: Vec<f64> = cur.v.iter().zip(pv).map(|(a, b)| a - b).collect();
                    let y: Vec<f64> = cur.grad.iter().zip(pg).map(|(a, b)| a - b).collect();
                    let ss: f64 = s.iter().map(|x| x * x).sum();
                    let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
                    let a = if sy < -1e-300 {
                        (-ss / sy).clamp(1e-8, 1e8)
                    } else {
                        2.0 * last_alpha
                    };
                    (grad_dir.clone(), StepMode::QuasiNewton, a)
                }
                None => (grad_dir.clone(), StepMode::Gradient, 1.0),
            },
        };

        // cap wild steps; backtracking handles the rest
        let dir_sup = dir.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let v_sup = cur.v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let cap = 50.0 * (1.0 + v_sup);
        if alpha * dir_sup > cap {
            alpha = cap / dir_sup;
        }

        // Armijo backtracking on the concave dual
        let slope: f64 = dir.iter().zip(&cur.grad).map(|(a, b)| a * b).sum();
        let mut accepted: Option<Evaluated> = None;
        let mut fallback: Option<Evaluated> = None; // best residual seen while trying
        for _ in 0..40 {
            let mut trial_v: Vec<f64> = cur
                .v
                .iter()
                .zip(&dir)
                .map(|(v, d)| v + alpha * d)
                .collect();
            mean_anchor(&mut trial_v);
            let trial = evaluate(spec, level, &trial_v, &target, opts.degeneracy_tol, &mut warm)?;
            let wanted = cur.dual + 1e-4 * alpha * slope - 1e-13 * (1.0 + cur.dual.abs());
            if trial.dual >= wanted {
                accepted = Some(trial);
                break;
            }
            if trial.residual < fallback.as_ref().map_or(cur.residual, |f| f.residual) {
                fallback = Some(trial);
            }
            alpha *= 0.5;
        }
        let next = match accepted.or(fallback) {
            Some(n) => n,
            None => {
                converged = cur.residual <= tol;
                break; // line search stalled; report the best point
            }
        };

        let step_norm = next
            .v
            .iter()
            .zip(&cur.v)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        prev = Some((cur.v.clone(), cur.grad.clone()));
        last_alpha = alpha.max(1e-8);
        cur = next;
        if cur.residual < best.residual * (1.0 - 1e-4) {
            best = cur.clone();
            since_best = 0;
        } else {
            if cur.residual < best.residual {
                best = cur.clone();
            }
            since_best += 1;
        }
        if opts.keep_trace {
            trace.push(IterationRecord {
                iteration: iterations,
                dual_value: cur.dual,
                residual: cur.residual,
                step_norm,
                mode,
            });
        }
    }

    if cur.residual < best.residual {
        best = cur.clone();
    }
    let result = assemble(spec, rho, &best, iterations, converged, trace, opts, &mut warm)?;
    if converged {
        Ok(result)
    } else {
        Err(InversionError::NonConvergence(Box::new(result)))
    }
}

/// Gauge-fix the best potential and re-solve once at the shifted values so
/// every reported quantity refers to the returned potential.
#[allow(clippy::too_many_arguments)]
fn assemble(
    spec: &ModelSpec,
    rho: &CoarseDensity,
    best: &Evaluated,
    iterations: usize,
    converged: bool,
    trace: Vec<IterationRecord>,
    opts: &AscentOptions,
    warm: &mut Vec<Vec<f64>>,
) -> Result<InversionResult, InversionError> {
    let hier = spec.hierarchy();
    let level = rho.level();
    let target = rho.masses();
    let shift = -best.energy / spec.particles() as f64;
    let potential = Potential::new(&hier, level, best.v.clone())?.shifted(shift);
    let gauged = evaluate(
        spec,
        level,
        potential.values(),
        &target,
        opts.degeneracy_tol,
        warm,
    )?;
    let pairing: f64 = potential
        .values()
        .iter()
        .zip(&target)
        .map(|(v, t)| v * t)
        .sum();
    let lambda_density = spec.density_of(&gauged.state)?;
    Ok(InversionResult {
        level,
        f_value: gauged.energy - pairing,
        gauge_residual: gauged.energy.abs(),
        lambda_density,
        mixing_weights: gauged.state.weights().to_vec(),
        residual: gauged.residual,
        iterations,
        converged,
        degeneracy: gauged.degeneracy,
        ground_gap: gauged.gap,
        target: rho.clone(),
        trace,
        options: opts.echo(opts.initial.is_some()),
        potential,
    })
}

/// F at a coarse density as an extended real: +inf outside the strictly
/// positive cone, otherwise the converged dual value.
pub fn functional_value(
    spec: &ModelSpec,
    rho: &CoarseDensity,
    opts: &AscentOptions,
) -> Result<f64, InversionError> {
    if !rho.is_strictly_positive() {
        return Ok(f64::INFINITY);
    }
    Ok(lieb_maximize(spec, rho, opts)?.f_value)
}

/// Like `functional_value` but a non-converged ascent yields its best dual
/// bound (a certified lower bound on F) tagged `false` instead of an error.
pub(crate) fn functional_value_best(
    spec: &ModelSpec,
    rho: &CoarseDensity,
    opts: &AscentOptions,
) -> Result<(f64, bool), InversionError> {
    if !rho.is_strictly_positive() {
        return Ok((f64::INFINITY, true));
    }
    match lieb_maximize(spec, rho, opts) {
        Ok(r) => Ok((r.f_value, true)),
        Err(InversionError::NonConvergence(partial)) => Ok((partial.f_value, false)),
        Err(e) => Err(e),
    }
}

/// The three terms of Delta[rho, v] = F[rho] + <v, rho> - E[v] >= 0, which
/// vanishes exactly on the graph of the subdifferential.
#[derive(Debug, Clone, Serialize)]
pub struct ExcessReport {
    pub delta: f64,
    pub f_part: f64,
    pub pairing_part: f64,
    pub e_part: f64,
    /// False when F came from a non-converged (but still valid lower-bound)
    /// ascent; delta then carries the same downward bias.
    pub f_converged: bool,
}

pub fn energetic_excess(
    spec: &ModelSpec,
    rho: &CoarseDensity,
    v: &Potential,
) -> Result<ExcessReport, InversionError> {
    let (f_part, f_converged) = match functional_value_best(spec, rho, &AscentOptions::tight())? {
        (f, _) if f.is_infinite() => {
            let cell = rho
                .averages()
                .iter()
                .position(|&a| a <= 0.0)
                .unwrap_or(0);
            return Err(InversionError::NotInteriorDensity {
                cell,
                average: rho.averages()[cell],
            });
        }
        (f, true) => (f, true),
        (f, false) => (f, false),
    };
    let pairing_part = v.pair_coarse(rho)?;
    let e_part = ground_energy(spec, v)?;
    Ok(ExcessReport {
        delta: f_part + pairing_part - e_part,
        f_part,
        pairing_part,
        e_part,
        f_converged,
    })
}

/// Result of probing the subgradient inequality
/// F[rho'] >= F[rho] - <v, rho' - rho> over sampled interior rho'.
#[derive(Debug, Clone, Serialize)]
pub struct SubgradientReport {
    pub holds: bool,
    pub samples_checked: usize,
    /// Smallest value of F[rho'] - F[rho] + <v, rho' - rho> seen; negative
    /// beyond tolerance means a violation.
    pub worst_slack: f64,
    pub violator: Option<CoarseDensity>,
}

/// Check whether -v acts as a subgradient of F at rho: first a directed
/// search along single-cell mass transfers, then `sample_count` random
/// interior densities at the same level.
pub fn subgradient_check(
    spec: &ModelSpec,
    rho: &CoarseDensity,
    v: &Potential,
    sample_count: usize,
    seed: u64,
) -> Result<SubgradientReport, InversionError> {
    let level = rho.level();
    let hier = spec.hierarchy();
    let k = hier.cell_count(level);
    if k < 2 {
        // single cell: the only density at this level is rho itself
        return Ok(SubgradientReport {
            holds: true,
            samples_checked: 0,
            worst_slack: 0.0,
            violator: None,
        });
    }
    let f_rho = functional_value(spec, rho, &AscentOptions::tight())?;
    let pair_rho = v.pair_coarse(rho)?;
    let mut worst = f64::INFINITY;
    let mut violator = None;
    let mut checked = 0usize;

    let consider = |rho_p: &CoarseDensity,
                        worst: &mut f64,
                        violator: &mut Option<CoarseDensity>,
                        checked: &mut usize|
     -> Result<(), InversionError> {
        let (f_p, _) = functional_value_best(spec, rho_p, &AscentOptions::default())?;
        if f_p.is_infinite() {
            return Ok(());
        }
        let slack = f_p - f_rho + (v.pair_coarse(rho_p)? - pair_rho);
        *checked += 1;
        if slack < *worst {
            *worst = slack;
            if slack < -tolerances::IDENTITY_SLACK {
                *violator = Some(rho_p.clone());
            }
        }
        Ok(())
    };

    // directed search: move mass into / out of each cell
    for cell in 0..k {
        for sign in [1.0f64, -1.0] {
            let mut delta = vec![-1.0 / (k - 1) as f64; k];
            delta[cell] = 1.0;
            // largest scale keeping every average at half its value
            let mut t_max = f64::INFINITY;
            for (i, &a) in rho.averages().iter().enumerate() {
                let move_i = sign * delta[i];
                if move_i < 0.0 {
                    t_max = t_max.min(0.5 * a / (-move_i));
                }
            }
            // small fractions matter: a genuine violation is linear in the
            // step while the functional's curvature gap grows quadratically,
            // so it is most visible close to the base density
            for frac in [0.01, 0.03, 0.1, 0.25, 0.5, 1.0] {
                let rho_p = rho.displaced(&delta, sign * frac * t_max)?;
                consider(&rho_p, &mut worst, &mut violator, &mut checked)?;
                if worst < -tolerances::IDENTITY_SLACK {
                    return Ok(SubgradientReport {
                        holds: false,
                        samples_checked: checked,
                        worst_slack: worst,
                        violator,
                    });
                }
            }
        }
    }

    for i in 0..sample_count {
        let mut rng = sampling::stream(seed, i as u64);
        let rho_p = sampling::interior_density(&hier, level, spec.particles(), 0.1, &mut rng);
        consider(&rho_p, &mut worst, &mut violator, &mut checked)?;
    }

    Ok(SubgradientReport {
        holds: worst >= -tolerances::IDENTITY_SLACK,
        samples_checked: checked,
        worst_slack: if worst.is_finite() { worst } else { 0.0 },
        violator,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::von_weizsacker;
    use crate::grid::Grid;

    fn spec1(points: usize) -> ModelSpec {
        ModelSpec::new(Grid::new(1.0, points).unwrap(), 1, 0.0, 0.5).unwrap()
    }

    /// Uniform coarse density carrying exactly N particles at this level
    /// (the quadrature measure of the box is M h, not L).
    fn uniform_density(hier: &ScaleHierarchy, level: usize, particles: usize) -> CoarseDensity {
        let k = hier.cell_count(level);
        let avg = particles as f64 / (k as f64 * hier.cell_width(level));
        CoarseDensity::new(hier, level, vec![avg; k], particles).unwrap()
    }

    fn forward_density(spec: &ModelSpec, v: &Potential, level: usize) -> CoarseDensity {
        let sol = engine::ground_space(spec, &v.embed_values(), None).unwrap();
        let state = EnsembleState::pure(sol.space.basis[0].clone(), spec.particles()).unwrap();
        let rho = spec.density_of(&state).unwrap();
        spec.hierarchy().project(&rho, level).unwrap()
    }

    #[test]
    fn round_trip_recovers_the_potential_modulo_constants() {
        let spec = spec1(128);
        let hier = spec.hierarchy();
        let level = 3;
        let v0 = Potential::new(
            &hier,
            level,
            vec![0.0, 3.0, -1.0, 2.0, 5.0, -2.0, 1.0, 0.5],
        )
        .unwrap();
        let rho = forward_density(&spec, &v0, level);
        let inv = lieb_maximize(&spec, &rho, &AscentOptions::default()).unwrap();
        assert!(inv.converged);
        assert!(inv.residual <= 1e-6);
        assert!(inv.gauge_residual <= 1e-8);
        // compare after aligning means
        let mean0 = v0.values().iter().sum::<f64>() / 8.0;
        let mean1 = inv.potential.values().iter().sum::<f64>() / 8.0;
        let sup = v0.sup_norm().max(1.0);
        for (a, b) in v0.values().iter().zip(inv.potential.values()) {
            assert!(
                ((a - mean0) - (b - mean1)).abs() <= 1e-4 * sup,
                "potential mismatch: {} vs {}",
                a - mean0,
                b - mean1
            );
        }
        // gauge identity: F + <v, rho> = E[v] = 0
        let pairing = inv.potential.pair_coarse(&rho).unwrap();
        assert!((inv.f_value + pairing).abs() <= 1e-8);
    }

    #[test]
    fn one_particle_f_equals_von_weizsacker() {
        let spec = spec1(128);
        let hier = spec.hierarchy();
        let mut rng = sampling::stream(11, 0);
        for _ in 0..3 {
            let rho = sampling::interior_density(&hier, 2, 1, 0.25, &mut rng);
            let inv = lieb_maximize(&spec, &rho, &AscentOptions::tight()).unwrap();
            let tw = von_weizsacker(&inv.lambda_density);
            assert!(
                (inv.f_value - tw).abs() <= 1e-6 * tw.abs().max(1.0),
                "F = {} vs T_W = {}",
                inv.f_value,
                tw
            );
        }
    }

    #[test]
    fn uniform_density_needs_a_nonconstant_potential() {
        let spec = spec1(128);
        let hier = spec.hierarchy();
        let rho = uniform_density(&hier, 1, 1);
        let inv = lieb_maximize(&spec, &rho, &AscentOptions::default()).unwrap();
        assert!(inv.residual <= 1e-6);
        let dv = inv.potential.values()[0] - inv.potential.values()[1];
        assert!(dv.abs() < 1e-6, "symmetric halves must get equal cells");
        // but at level 2 the outer and inner cells must differ
        let rho4 = uniform_density(&hier, 2, 1);
        let inv4 = lieb_maximize(&spec, &rho4, &AscentOptions::default()).unwrap();
        assert!(inv4.residual <= 1e-6);
        let vals = inv4.potential.values();
        assert!(
            (vals[0] - vals[1]).abs() > 1e-2,
            "box curvature forces an outer/inner contrast: {vals:?}"
        );
    }

    #[test]
    fn single_cell_inversion_is_the_gauge_constant() {
        let spec = spec1(128);
        let hier = spec.hierarchy();
        let rho = uniform_density(&hier, 0, 1);
        let inv = lieb_maximize(&spec, &rho, &AscentOptions::default()).unwrap();
        assert_eq!(inv.iterations, 0);
        assert!(inv.converged);
        assert!(inv.gauge_residual <= 1e-9);
        // v = -E0 (box ground energy) so that E[v] = 0
        let e0 = engine::ground_energy(&spec, &vec![0.0; 128]).unwrap();
        assert!((inv.potential.values()[0] + e0).abs() <= 1e-9);
        assert!((inv.f_value - e0).abs() <= 1e-9);
    }

    #[test]
    fn ground_energy_gauge_and_concavity() {
        let spec = spec1(128);
        let hier = spec.hierarchy();
        let mut rng = sampling::stream(5, 0);
        let v1 = sampling::cell_potential(&hier, 3, 4.0, &mut rng);
        let v2 = sampling::cell_potential(&hier, 3, 4.0, &mut rng);
        let e1 = ground_energy(&spec, &v1).unwrap();
        // E[v + c] = E[v] + N c
        let e1c = ground_energy(&spec, &v1.shifted(2.5)).unwrap();
        assert!((e1c - e1 - 2.5).abs() <= 1e-9);
        // concavity at the midpoint
        let e2 = ground_energy(&spec, &v2).unwrap();
        let mid: Vec<f64> = v1
            .values()
            .iter()
            .zip(v2.values())
            .map(|(a, b)| 0.5 * (a + b))
            .collect();
        let vmid = Potential::new(&hier, 3, mid).unwrap();
        let emid = ground_energy(&spec, &vmid).unwrap();
        assert!(emid >= 0.5 * (e1 + e2) - 1e-10);
    }

    #[test]
    fn excess_is_zero_on_the_graph_and_gauge_invariant() {
        let spec = spec1(128);
        let hier = spec.hierarchy();
        let mut rng = sampling::stream(6, 0);
        let rho = sampling::interior_density(&hier, 2, 1, 0.3, &mut rng);
        let inv = lieb_maximize(&spec, &rho, &AscentOptions::tight()).unwrap();
        let ex = energetic_excess(&spec, &rho, &inv.potential).unwrap();
        assert!(ex.delta.abs() <= 1e-8, "delta = {}", ex.delta);
        assert!(ex.delta >= -1e-9);
        let ex_shift = energetic_excess(&spec, &rho, &inv.potential.shifted(3.7)).unwrap();
        assert!((ex_shift.delta - ex.delta).abs() <= 1e-9);
        // identity delta = F + <v,rho> - E within 1e-10
        assert!(
            (ex.delta - (ex.f_part + ex.pairing_part - ex.e_part)).abs() <= 1e-10
        );
    }

    #[test]
    fn excess_grows_along_a_ray_of_wrong_potentials() {
        let spec = spec1(128);
        let hier = spec.hierarchy();
        let mut rng = sampling::stream(7, 0);
        let rho = sampling::interior_density(&hier, 2, 1, 0.3, &mut rng);
        let inv = lieb_maximize(&spec, &rho, &AscentOptions::tight()).unwrap();
        let bump = [1.0, -0.4, 0.2, -0.8];
        let mut last = 0.0;
        for radius in [0.2, 0.4, 0.8, 1.6, 3.2] {
            let values: Vec<f64> = inv
                .potential
                .values()
                .iter()
                .zip(&bump)
                .map(|(v, b)| v + radius * b)
                .collect();
            let v = Potential::new(&hier, 2, values).unwrap();
            let ex = energetic_excess(&spec, &rho, &v).unwrap();
            assert!(ex.delta > last - 1e-10, "delta must grow along the ray");
            assert!(ex.delta >= -1e-9);
            last = ex.delta;
        }
        assert!(last > 1e-4, "far potentials must have visible excess");
    }

    #[test]
    fn fenchel_young_with_equality_exactly_at_the_representing_potential() {
        let spec = spec1(128);
        let hier = spec.hierarchy();
        let mut rng = sampling::stream(8, 0);
        let rho = sampling::interior_density(&hier, 2, 1, 0.3, &mut rng);
        let f = functional_value(&spec, &rho, &AscentOptions::tight()).unwrap();
        for i in 0..5 {
            let mut r2 = sampling::stream(8, 100 + i);
            let v = sampling::cell_potential(&hier, 2, 3.0, &mut r2);
            let lhs = f + v.pair_coarse(&rho).unwrap();
            let e = ground_energy(&spec, &v).unwrap();
            assert!(lhs >= e - 1e-9, "Fenchel-Young violated: {lhs} < {e}");
        }
        let inv = lieb_maximize(&spec, &rho, &AscentOptions::tight()).unwrap();
        let lhs = f + inv.potential.pair_coarse(&rho).unwrap();
        let e = ground_energy(&spec, &inv.potential).unwrap();
        assert!((lhs - e).abs() <= 1e-8, "equality at v[rho]: {lhs} vs {e}");
    }

    #[test]
    fn two_starts_agree_after_gauge_fixing() {
        let spec = spec1(128);
        let hier = spec.hierarchy();
        let mut rng = sampling::stream(9, 0);
        let rho = sampling::interior_density(&hier, 2, 1, 0.3, &mut rng);
        let a = lieb_maximize(&spec, &rho, &AscentOptions::default()).unwrap();
        let start = sampling::cell_potential(&hier, 2, 2.0, &mut rng);
        let b = lieb_maximize(
            &spec,
            &rho,
            &AscentOptions::default().with_initial(start),
        )
        .unwrap();
        for (x, y) in a.potential.values().iter().zip(b.potential.values()) {
            assert!((x - y).abs() <= 1e-4, "HK uniqueness: {x} vs {y}");
        }
    }

    #[test]
    fn subgradient_holds_at_the_representing_potential_and_fails_off_it() {
        let spec = spec1(128);
        let hier = spec.hierarchy();
        let mut rng = sampling::stream(10, 0);
        let rho = sampling::interior_density(&hier, 2, 1, 0.3, &mut rng);
        let inv = lieb_maximize(&spec, &rho, &AscentOptions::tight()).unwrap();
        let good = subgradient_check(&spec, &rho, &inv.potential, 12, 42).unwrap();
        assert!(good.holds, "worst slack {}", good.worst_slack);
        assert!(good.samples_checked >= 12);

        let mut bad_values = inv.potential.values().to_vec();
        bad_values[1] += 0.5;
        let bad = Potential::new(&hier, 2, bad_values).unwrap();
        let report = subgradient_check(&spec, &rho, &bad, 12, 42).unwrap();
        assert!(!report.holds);
        assert!(report.violator.is_some());
        assert!(report.worst_slack < -tolerances::IDENTITY_SLACK);
    }

    #[test]
    fn single_cell_subgradient_is_degenerately_true() {
        let spec = spec1(128);
        let hier = spec.hierarchy();
        let rho = uniform_density(&hier, 0, 1);
        let v = Potential::constant(&hier, 0, -3.0);
        let report = subgradient_check(&spec, &rho, &v, 10, 1).unwrap();
        assert!(report.holds);
        assert_eq!(report.samples_checked, 0);
    }

    #[test]
    fn noninteracting_pair_round_trip_uses_the_determinant_path() {
        let spec = ModelSpec::new(Grid::new(1.0, 64).unwrap(), 2, 0.0, 0.5).unwrap();
        let hier = spec.hierarchy();
        let v0 = Potential::new(&hier, 2, vec![0.0, 4.0, -2.0, 1.0]).unwrap();
        let rho = forward_density(&spec, &v0, 2);
        let inv = lieb_maximize(&spec, &rho, &AscentOptions::default()).unwrap();
        assert!(inv.converged);
        let mean0 = v0.values().iter().sum::<f64>() / 4.0;
        let mean1 = inv.potential.values().iter().sum::<f64>() / 4.0;
        for (a, b) in v0.values().iter().zip(inv.potential.values()) {
            assert!(((a - mean0) - (b - mean1)).abs() <= 1e-4 * 4.0);
        }
        assert!((inv.lambda_density.mass() - 2.0).abs() <= 1e-9);
    }

    #[test]
    fn interacting_pair_round_trip_on_a_small_grid() {
        // 16 points -> pair dimension 120, dense path with exact response
        let spec = ModelSpec::new(Grid::new(1.0, 16).unwrap(), 2, 1.0, 0.5).unwrap();
        let hier = spec.hierarchy();
        let v0 = Potential::new(&hier, 2, vec![2.0, -1.0, 0.5, 3.0]).unwrap();
        let rho = forward_density(&spec, &v0, 2);
        let inv = lieb_maximize(&spec, &rho, &AscentOptions::default()).unwrap();
        assert!(inv.converged);
        let mean0 = v0.values().iter().sum::<f64>() / 4.0;
        let mean1 = inv.potential.values().iter().sum::<f64>() / 4.0;
        for (a, b) in v0.values().iter().zip(inv.potential.values()) {
            assert!(
                ((a - mean0) - (b - mean1)).abs() <= 1e-4 * 3.0,
                "pair response inversion drifted"
            );
        }
    }

    #[test]
    fn f_bound_holds_on_sampled_inversions() {
        let spec = spec1(128);
        let hier = spec.hierarchy();
        let mut rng = sampling::stream(12, 0);
        for level in [1usize, 2, 3] {
            let fmax = engine::f_max(&spec, level).unwrap();
            let rho = sampling::interior_density(&hier, level, 1, 0.2, &mut rng);
            let inv = lieb_maximize(&spec, &rho, &AscentOptions::default()).unwrap();
            assert!(inv.f_value >= 0.0);
            assert!(inv.f_value <= fmax + 1e-9, "{} > {}", inv.f_value, fmax);
        }
    }

    #[test]
    fn simplex_least_squares_solves_small_mixes() {
        let rows = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let w = simplex_least_squares(&rows, &[0.3, 0.7]);
        assert!((w[0] - 0.3).abs() < 1e-9 && (w[1] - 0.7).abs() < 1e-9);
        // infeasible target clips to the simplex face
        let w2 = simplex_least_squares(&rows, &[2.0, -1.0]);
        assert!(w2[0] > 0.999 && w2[1] < 1e-9);
        assert!((w2.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn near_degenerate_double_well_inverts_with_ensemble_mixing() {
        let spec = spec1(64);
        let hier = spec.hierarchy();
        // hard symmetric barrier: the lowest two states are nearly degenerate
        let barrier = Potential::new(&hier, 2, vec![0.0, 500.0, 500.0, 0.0]).unwrap();
        let sol = engine::ground_space(&spec, &barrier.embed_values(), Some(1.0)).unwrap();
        assert_eq!(sol.space.degeneracy, 2);
        // target: asymmetric mix of the two near-degenerate densities
        let state = EnsembleState::new(
            vec![0.7, 0.3],
            sol.space.basis.clone(),
            1,
        )
        .unwrap();
        let rho = hier
            .project(&spec.density_of(&state).unwrap(), 2)
            .unwrap();
        let opts = AscentOptions {
            degeneracy_tol: Some(1.0),
            ..AscentOptions::default()
        };
        let inv = lieb_maximize(&spec, &rho, &opts).unwrap();
        assert!(inv.converged);
        assert_eq!(inv.degeneracy, 2);
        assert!(inv.mixing_weights.len() == 2);
        assert!((inv.mixing_weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(inv.residual <= 1e-6);
    }

    #[test]
    fn cancellation_is_honored() {
        let spec = spec1(128);
        let hier = spec.hierarchy();
        let mut rng = sampling::stream(13, 0);
        let rho = sampling::interior_density(&hier, 3, 1, 0.2, &mut rng);
        let token = CancelToken::new();
        token.cancel();
        let opts = AscentOptions {
            cancel: Some(token),
            ..AscentOptions::default()
        };
        match lieb_maximize(&spec, &rho, &opts) {
            Err(InversionError::Cancelled(partial)) => {
                assert!(!partial.converged);
            }
            other => panic!("expected cancellation, got {other:?}"),
        }
    }

    #[test]
    fn not_interior_is_rejected_with_the_offending_cell() {
        let spec = spec1(128);
        let hier = spec.hierarchy();
        let w = hier.cell_width(2);
        // masses (0.5, 0, 0.25, 0.25): one cell sits exactly on the boundary
        let averages: Vec<f64> = [0.5, 0.0, 0.25, 0.25].iter().map(|m| m / w).collect();
        let rho = CoarseDensity::new(&hier, 2, averages, 1).unwrap();
        match lieb_maximize(&spec, &rho, &AscentOptions::default()) {
            Err(InversionError::NotInteriorDensity { cell, .. }) => assert_eq!(cell, 1),
            other => panic!("expected NotInteriorDensity, got {other:?}"),
        }
    }

    #[test]
    fn inversion_result_serializes_to_json() {
        let spec = spec1(128);
        let hier = spec.hierarchy();
        let rho = uniform_density(&hier, 1, 1);
        let opts = AscentOptions {
            keep_trace: true,
            ..AscentOptions::default()
        };
        let inv = lieb_maximize(&spec, &rho, &opts).unwrap();
        let json = inv.to_json().unwrap();
        assert!(json.contains("\"f_value\""));
        assert!(json.contains("\"trace\""));
        assert!(json.contains("\"residual\""));
        let parsed: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(parsed["level"], 1);
    }
}

