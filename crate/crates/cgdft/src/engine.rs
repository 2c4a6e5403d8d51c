//! Few-fermion quantum engine on the fine grid.
//!
//! Kinetic term is the three-point Laplacian with hbar = m = 1 and prefactor
//! 1/2 (diagonal 1/h^2, hops -1/(2 h^2), Dirichlet walls). Two spinless
//! fermions live in the ordered-pair basis i < j of dimension M(M-1)/2 and
//! repel through the soft Coulomb kernel lambda / sqrt((x-x')^2 + a^2).
//!
//! Solver paths, chosen by sector and dimension:
//!   one particle            -> dense symmetric eigensolve (full spectrum)
//!   two particles, lambda=0 -> orbital solve plus determinant assembly
//!   two particles, small    -> dense eigensolve in the pair basis
//!   two particles, large    -> deflated Lanczos, lowest cluster only
//! The dense paths keep enough spectrum to build exact linear-response
//! matrices; the Lanczos path reports the ground cluster and gap only.

use crate::density::FineDensity;
use crate::grid::{Grid, ModelError, ScaleHierarchy};
use crate::lanczos;
use crate::potential::Potential;
use crate::tolerances;
use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("pair basis dimension {dim} exceeds the guard {guard}")]
    DimensionOverflow { dim: usize, guard: usize },
    #[error("ground space multiplicity {count} exceeds the supported maximum {max}")]
    DegeneracyGuard { count: usize, max: usize },
    #[error("eigensolver failed: {0}")]
    Solver(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Immutable description of the model: box, particle number, interaction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    grid: Grid,
    particles: usize,
    interaction: f64,
    softening: f64,
}

impl ModelSpec {
    pub fn new(
        grid: Grid,
        particles: usize,
        interaction: f64,
        softening: f64,
    ) -> Result<Self, EngineError> {
        crate::density::check_particles(particles)?;
        if !(interaction.is_finite() && interaction >= 0.0) {
            return Err(ModelError::BadInteraction(interaction).into());
        }
        if !(softening.is_finite() && softening > 0.0) {
            return Err(ModelError::BadSoftening(softening).into());
        }
        let spec = ModelSpec {
            grid,
            particles,
            interaction,
            softening,
        };
        if spec.dimension() > tolerances::PAIR_DIM_GUARD {
            return Err(EngineError::DimensionOverflow {
                dim: spec.dimension(),
                guard: tolerances::PAIR_DIM_GUARD,
            });
        }
        Ok(spec)
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn hierarchy(&self) -> ScaleHierarchy {
        ScaleHierarchy::new(self.grid)
    }

    pub fn particles(&self) -> usize {
        self.particles
    }

    pub fn interaction(&self) -> f64 {
        self.interaction
    }

    pub fn softening(&self) -> f64 {
        self.softening
    }

    /// Same model with the interaction switched off.
    pub fn noninteracting(&self) -> ModelSpec {
        ModelSpec {
            interaction: 0.0,
            ..*self
        }
    }

    /// Hilbert space dimension of the configured sector.
    pub fn dimension(&self) -> usize {
        let m = self.grid.points();
        match self.particles {
            1 => m,
            _ => m * (m - 1) / 2,
        }
    }

    pub fn soft_coulomb(&self, xi: f64, xj: f64) -> f64 {
        let d = xi - xj;
        self.interaction / (d * d + self.softening * self.softening).sqrt()
    }
}

/// Ordered-pair index tables for the two-particle sector.
pub(crate) struct PairBasis {
    pub m: usize,
    pub dim: usize,
    pub first: Vec<u32>,
    pub second: Vec<u32>,
    offset: Vec<usize>,
}

impl PairBasis {
    pub fn new(m: usize) -> Self {
        let dim = m * (m - 1) / 2;
        let mut first = Vec::with_capacity(dim);
        let mut second = Vec::with_capacity(dim);
        let mut offset = Vec::with_capacity(m);
        let mut p = 0usize;
        for i in 0..m {
            offset.push(p);
            for j in i + 1..m {
                first.push(i as u32);
                second.push(j as u32);
                p += 1;
            }
        }
        PairBasis {
            m,
            dim,
            first,
            second,
            offset,
        }
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < j);
        self.offset[i] + (j - i - 1)
    }
}

/// Matrix-free Hamiltonian in whichever sector the spec selects.
pub(crate) struct HamOp {
    particles: usize,
    hop: f64, // 1/(2 h^2)
    diag: Vec<f64>,
    pairs: Option<PairBasis>,
}

impl HamOp {
    /// `v` is the external potential sampled on the fine grid; the kinetic
    /// and interaction parts come from `spec`.
    pub fn new(spec: &ModelSpec, v: &[f64]) -> HamOp {
        let m = spec.grid.points();
        debug_assert_eq!(v.len(), m);
        let h = spec.grid.spacing();
        let hop = 0.5 / (h * h);
        match spec.particles {
            1 => {
                let diag = v.iter().map(|&vi| 2.0 * hop + vi).collect();
                HamOp {
                    particles: 1,
                    hop,
                    diag,
                    pairs: None,
                }
            }
            _ => {
                let pairs = PairBasis::new(m);
                let xs = spec.grid.positions();
                let mut diag = Vec::with_capacity(pairs.dim);
                for p in 0..pairs.dim {
                    let (i, j) = (pairs.first[p] as usize, pairs.second[p] as usize);
                    diag.push(4.0 * hop + v[i] + v[j] + spec.soft_coulomb(xs[i], xs[j]));
                }
                HamOp {
                    particles: 2,
                    hop,
                    diag,
                    pairs: Some(pairs),
                }
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        let d = &self.diag;
        match self.particles {
            1 => {
                let m = d.len();
                for i in 0..m {
                    let mut acc = d[i] * x[i];
                    if i > 0 {
                        acc -= self.hop * x[i - 1];
                    }
                    if i + 1 < m {
                        acc -= self.hop * x[i + 1];
                    }
                    y[i] = acc;
                }
            }
            _ => {
                let pb = self.pairs.as_ref().unwrap();
                let m = pb.m;
                for p in 0..pb.dim {
                    let (i, j) = (pb.first[p] as usize, pb.second[p] as usize);
                    let mut acc = d[p] * x[p];
                    // hops of either particle; a hop onto the partner's site
                    // is Pauli-blocked and simply absent
                    if i > 0 {
                        acc -= self.hop * x[pb.index(i - 1, j)];
                    }
                    if i + 1 < j {
                        acc -= self.hop * x[pb.index(i + 1, j)];
                    }
                    if j > i + 1 {
                        acc -= self.hop * x[pb.index(i, j - 1)];
                    }
                    if j + 1 < m {
                        acc -= self.hop * x[pb.index(i, j + 1)];
                    }
                    y[p] = acc;
                }
            }
        }
    }

    pub fn materialize(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut mat = DMatrix::<f64>::zeros(n, n);
        let mut x = vec![0.0; n];
        let mut y = vec![0.0; n];
        for c in 0..n {
            x[c] = 1.0;
            self.apply(&x, &mut y);
            x[c] = 0.0;
            for r in 0..n {
                if y[r] != 0.0 {
                    mat[(r, c)] = y[r];
                }
            }
        }
        mat
    }

    pub fn expectation(&self, x: &[f64]) -> f64 {
        let mut y = vec![0.0; x.len()];
        self.apply(x, &mut y);
        x.iter().zip(&y).map(|(a, b)| a * b).sum()
    }

    /// Gershgorin bound on the spectral width, cheap and deterministic.
    pub fn gershgorin_width(&self) -> f64 {
        let radius = match self.particles {
            1 => 2.0 * self.hop,
            _ => 4.0 * self.hop,
        };
        let lo = self.diag.iter().cloned().fold(f64::INFINITY, f64::min) - radius;
        let hi = self.diag.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + radius;
        hi - lo
    }
}

/// Orthonormal basis of the near-degenerate bottom of the spectrum.
#[derive(Debug, Clone)]
pub struct GroundSpace {
    pub energy: f64,
    pub degeneracy: usize,
    pub basis: Vec<Vec<f64>>,
    /// Energy distance from the ground level to the first state above the
    /// cluster; infinite when the cluster exhausts the computed spectrum.
    pub gap: f64,
    pub spectral_width: f64,
}

/// Dense spectral data kept around for exact linear response.
#[derive(Debug, Clone)]
pub(crate) enum ResponseSource {
    /// Full one-particle spectrum; `occupied` lists the filled orbitals
    /// (one orbital for N=1, the two lowest for the determinant sector).
    Orbitals {
        evals: Vec<f64>,
        evecs: Vec<Vec<f64>>,
        occupied: Vec<usize>,
    },
    /// Full pair-basis spectrum, ground state first.
    Pair {
        evals: Vec<f64>,
        evecs: Vec<Vec<f64>>,
    },
}

pub struct GroundSolution {
    pub space: GroundSpace,
    pub(crate) response: Option<ResponseSource>,
}

fn sign_fix(v: &mut [f64]) {
    let mut idx = 0;
    let mut best = -1.0;
    for (i, &x) in v.iter().enumerate() {
        if x.abs() > best {
            best = x.abs();
            idx = i;
        }
    }
    if v[idx] < 0.0 {
        for x in v.iter_mut() {
            *x = -*x;
        }
    }
}

/// Number of lowest states re-refined after the dense eigensolve. Covers
/// every state whose vector is consumed downstream (ground clusters up to
/// the degeneracy guard, and the orbital configurations probed by the
/// two-fermion determinant path).
const POLISH_COUNT: usize = tolerances::DEGENERACY_GUARD + 5;

fn dense_sorted(mat: DMatrix<f64>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = mat.nrows();
    let se = SymmetricEigen::new(mat.clone());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| se.eigenvalues[a].total_cmp(&se.eigenvalues[b]));
    let mut evals: Vec<f64> = order.iter().map(|&k| se.eigenvalues[k]).collect();
    let mut evecs: Vec<Vec<f64>> = order
        .iter()
        .map(|&k| {
            let mut col: Vec<f64> = se.eigenvectors.column(k).iter().copied().collect();
            sign_fix(&mut col);
            col
        })
        .collect();
    polish_lowest(&mat, &mut evals, &mut evecs, POLISH_COUNT);
    (evals, evecs)
}

/// One or two sweeps of Rayleigh-shifted inverse iteration on the lowest
/// `count` states. The QR eigensolver delivers eigenvector components with
/// roughly 1e3 ulp error, which caps coarse-density accuracy near 1e-9;
/// refining against the matrix itself restores componentwise accuracy to a
/// few ulps so tight potential inversions can reach their residual target.
fn polish_lowest(mat: &DMatrix<f64>, evals: &mut [f64], evecs: &mut [Vec<f64>], count: usize) {
    use nalgebra::DVector;
    let n = mat.nrows();
    let count = count.min(evals.len());
    let scale = mat
        .iter()
        .fold(0.0f64, |a, &x| a.max(x.abs()))
        .max(1.0);
    for s in 0..count {
        let mut lam = evals[s];
        let mut x = DVector::from_column_slice(&evecs[s]);
        for sweep in 0..2 {
            // keep the iterate out of already-polished lower states so
            // near-degenerate shifts cannot collapse the cluster basis
            for prev in evecs.iter().take(s) {
                let c: f64 = prev.iter().zip(x.iter()).map(|(a, b)| a * b).sum();
                for (xi, pi) in x.iter_mut().zip(prev.iter()) {
                    *xi -= c * pi;
                }
            }
            let nrm = x.norm();
            if !(nrm.is_finite() && nrm > 0.0) {
                x = DVector::from_column_slice(&evecs[s]);
                break;
            }
            x /= nrm;
            if sweep > 0 {
                // second sweep only if the first left a visible residual
                let r = mat * &x - lam * &x;
                if r.amax() <= 64.0 * f64::EPSILON * scale {
                    break;
                }
            }
            let mut shifted = mat.clone();
            let mut bump = 0.0;
            let y = loop {
                for i in 0..n {
                    shifted[(i, i)] = mat[(i, i)] - (lam + bump);
                }
                match shifted.clone().lu().solve(&x) {
                    Some(y) if y.iter().all(|v| v.is_finite()) && y.norm() > 0.0 => break Some(y),
                    _ if bump == 0.0 => bump = 1e-12 * scale,
                    _ => break None,
                }
            };
            let Some(y) = y else { break };
            x = &y / y.norm();
            lam = x.dot(&(mat * &x));
        }
        for prev in evecs.iter().take(s) {
            let c: f64 = prev.iter().zip(x.iter()).map(|(a, b)| a * b).sum();
            for (xi, pi) in x.iter_mut().zip(prev.iter()) {
                *xi -= c * pi;
            }
        }
        let nrm = x.norm();
        if nrm.is_finite() && nrm > 0.0 {
            x /= nrm;
            evals[s] = x.dot(&(mat * &x));
            let mut col: Vec<f64> = x.iter().copied().collect();
            sign_fix(&mut col);
            evecs[s] = col;
        }
    }
    // polishing shifts values by a few ulps; restore ascending order
    for s in 1..count {
        let mut k = s;
        while k > 0 && evals[k] < evals[k - 1] {
            evals.swap(k, k - 1);
            evecs.swap(k, k - 1);
            k -= 1;
        }
    }
}

/// Energy-then-lexicographic ordering inside a degenerate cluster.
fn order_cluster(cluster: &mut [(f64, Vec<f64>)]) {
    cluster.sort_by(|a, b| {
        a.0.total_cmp(&b.0).then_with(|| {
            for (x, y) in a.1.iter().zip(&b.1) {
                let c = x.total_cmp(y);
                if c != std::cmp::Ordering::Equal {
                    return c;
                }
            }
            std::cmp::Ordering::Equal
        })
    });
}

fn cluster_bottom(
    evals: &[f64],
    deg_tol: f64,
) -> (usize, f64) {
    let e0 = evals[0];
    let mut k = 1;
    while k < evals.len() && evals[k] - e0 <= deg_tol {
        k += 1;
    }
    let gap = if k < evals.len() {
        evals[k] - e0
    } else {
        f64::INFINITY
    };
    (k, gap)
}

/// Ground space of H = T + V_ee + v for the fine-sampled potential `v`.
/// `deg_tol` overrides the default degeneracy window (a relative fraction of
/// the spectral width); `warm` may carry starting vectors for the iterative
/// path.
pub fn ground_space_warm(
    spec: &ModelSpec,
    v: &[f64],
    deg_tol: Option<f64>,
    warm: &[Vec<f64>],
) -> Result<GroundSolution, EngineError> {
    if v.len() != spec.grid.points() {
        return Err(ModelError::BadLength2 {
            expected: spec.grid.points(),
            got: v.len(),
        }
        .into());
    }
    if spec.particles == 2 && spec.interaction == 0.0 {
        return determinant_ground(spec, v, deg_tol);
    }
    let op = HamOp::new(spec, v);
    let width = op.gershgorin_width();
    let tol_deg = deg_tol.unwrap_or(tolerances::DEGENERACY_REL * width);

    if op.dim() <= tolerances::DENSE_DIM_LIMIT {
        let (evals, evecs) = dense_sorted(op.materialize());
        let (count, gap) = cluster_bottom(&evals, tol_deg);
        if count > tolerances::DEGENERACY_GUARD {
            return Err(EngineError::DegeneracyGuard {
                count,
                max: tolerances::DEGENERACY_GUARD,
            });
        }
        let mut cluster: Vec<(f64, Vec<f64>)> = (0..count)
            .map(|k| (evals[k], evecs[k].clone()))
            .collect();
        order_cluster(&mut cluster);
        let space = GroundSpace {
            energy: evals[0],
            degeneracy: count,
            basis: cluster.into_iter().map(|(_, v)| v).collect(),
            gap,
            spectral_width: evals[evals.len() - 1] - evals[0],
        };
        let response = match spec.particles {
            1 => Some(ResponseSource::Orbitals {
                evals,
                evecs,
                occupied: vec![0],
            }),
            _ => Some(ResponseSource::Pair { evals, evecs }),
        };
        return Ok(GroundSolution { space, response });
    }

    // Iterative path: extend the computed bottom until a clear gap appears.
    let mut want = 2usize.min(op.dim());
    loop {
        let pairs = lanczos::lowest_eigenpairs(
            op.dim(),
            |x, y| op.apply(x, y),
            want,
            &[],
            warm,
            0x6f9d,
            tolerances::LANCZOS_TOL,
        )
        .map_err(EngineError::Solver)?;
        let evals: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let (count, gap) = cluster_bottom(&evals, tol_deg);
        if count > tolerances::DEGENERACY_GUARD {
            return Err(EngineError::DegeneracyGuard {
                count,
                max: tolerances::DEGENERACY_GUARD,
            });
        }
        if count < want || want == op.dim() {
            let mut cluster: Vec<(f64, Vec<f64>)> = pairs
                .into_iter()
                .take(count)
                .map(|(e, mut v)| {
                    sign_fix(&mut v);
                    (e, v)
                })
                .collect();
            order_cluster(&mut cluster);
            return Ok(GroundSolution {
                space: GroundSpace {
                    energy: evals[0],
                    degeneracy: count,
                    basis: cluster.into_iter().map(|(_, v)| v).collect(),
                    gap,
                    spectral_width: width,
                },
                response: None,
            });
        }
        want += 1;
    }
}

pub fn ground_space(
    spec: &ModelSpec,
    v: &[f64],
    deg_tol: Option<f64>,
) -> Result<GroundSolution, EngineError> {
    ground_space_warm(spec, v, deg_tol, &[])
}

pub fn ground_space_of_potential(
    spec: &ModelSpec,
    v: &Potential,
    deg_tol: Option<f64>,
) -> Result<GroundSolution, EngineError> {
    ground_space(spec, &v.embed_values(), deg_tol)
}

/// Bottom-of-spectrum energy E[v].
pub fn ground_energy(spec: &ModelSpec, v: &[f64]) -> Result<f64, EngineError> {
    lowest_energy_only(spec, v)
}

fn lowest_energy_only(spec: &ModelSpec, v: &[f64]) -> Result<f64, EngineError> {
    if spec.particles == 2 && spec.interaction == 0.0 {
        let sol = determinant_ground(spec, v, None)?;
        return Ok(sol.space.energy);
    }
    let op = HamOp::new(spec, v);
    if op.dim() <= tolerances::DENSE_DIM_LIMIT {
        let (evals, _) = dense_sorted(op.materialize());
        Ok(evals[0])
    } else {
        let pairs = lanczos::lowest_eigenpairs(
            op.dim(),
            |x, y| op.apply(x, y),
            1,
            &[],
            &[],
            0x55aa,
            tolerances::LANCZOS_TOL,
        )
        .map_err(EngineError::Solver)?;
        Ok(pairs[0].0)
    }
}

/// Non-interacting two-fermion sector via occupied orbitals. Exact and
/// cheap: configurations are pairs of one-particle levels.
fn determinant_ground(
    spec: &ModelSpec,
    v: &[f64],
    deg_tol: Option<f64>,
) -> Result<GroundSolution, EngineError> {
    let one = ModelSpec {
        particles: 1,
        ..*spec
    };
    let op1 = HamOp::new(&one, v);
    let (evals, evecs) = dense_sorted(op1.materialize());
    let m = evals.len();

    // enumerate low configurations (a < b), energy e_a + e_b
    let probe = m.min(tolerances::DEGENERACY_GUARD + 3);
    let mut configs: Vec<(f64, usize, usize)> = Vec::new();
    for a in 0..probe {
        for b in a + 1..m.min(probe + 2) {
            configs.push((evals[a] + evals[b], a, b));
        }
    }
    configs.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));

    let width = (evals[m - 1] + evals[m - 2]) - (evals[0] + evals[1]);
    let tol_deg = deg_tol.unwrap_or(tolerances::DEGENERACY_REL * width);
    let energies: Vec<f64> = configs.iter().map(|c| c.0).collect();
    let (count, gap) = cluster_bottom(&energies, tol_deg);
    if count > tolerances::DEGENERACY_GUARD {
        return Err(EngineError::DegeneracyGuard {
            count,
            max: tolerances::DEGENERACY_GUARD,
        });
    }

    let pb = PairBasis::new(m);
    let mut cluster: Vec<(f64, Vec<f64>)> = configs[..count]
        .iter()
        .map(|&(e, a, b)| {
            let (pa, pbv) = (&evecs[a], &evecs[b]);
            let mut vec = vec![0.0; pb.dim];
            for p in 0..pb.dim {
                let (i, j) = (pb.first[p] as usize, pb.second[p] as usize);
                vec[p] = pa[i] * pbv[j] - pa[j] * pbv[i];
            }
            let n: f64 = vec.iter().map(|x| x * x).sum::<f64>().sqrt();
            for x in vec.iter_mut() {
                *x /= n;
            }
            sign_fix(&mut vec);
            (e, vec)
        })
        .collect();
    order_cluster(&mut cluster);

    let response = if count == 1 {
        let (_, a, b) = configs[0];
        Some(ResponseSource::Orbitals {
            evals,
            evecs,
            occupied: vec![a, b],
        })
    } else {
        None
    };
    Ok(GroundSolution {
        space: GroundSpace {
            energy: energies[0],
            degeneracy: count,
            basis: cluster.into_iter().map(|(_, v)| v).collect(),
            gap,
            spectral_width: width,
        },
        response,
    })
}

/// Mixed state over an orthonormal family, weights on the simplex.
#[derive(Debug, Clone)]
pub struct EnsembleState {
    weights: Vec<f64>,
    vectors: Vec<Vec<f64>>,
    particles: usize,
}

impl EnsembleState {
    pub fn new(
        weights: Vec<f64>,
        vectors: Vec<Vec<f64>>,
        particles: usize,
    ) -> Result<Self, EngineError> {
        if weights.len() != vectors.len() || weights.is_empty() {
            return Err(EngineError::Solver(
                "ensemble needs one weight per vector".into(),
            ));
        }
        if weights.len() > tolerances::DEGENERACY_GUARD {
            return Err(EngineError::DegeneracyGuard {
                count: weights.len(),
                max: tolerances::DEGENERACY_GUARD,
            });
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|&w| w < -1e-12) || (total - 1.0).abs() > 1e-12 {
            return Err(EngineError::Solver(format!(
                "ensemble weights must be a probability vector (sum {total})"
            )));
        }
        for (k, a) in vectors.iter().enumerate() {
            let n: f64 = a.iter().map(|x| x * x).sum();
            if (n - 1.0).abs() > 1e-10 {
                return Err(EngineError::Solver(format!(
                    "ensemble vector {k} is not normalized"
                )));
            }
            for b in vectors.iter().take(k) {
                let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                if d.abs() > 1e-10 {
                    return Err(EngineError::Solver(
                        "ensemble vectors are not orthogonal".into(),
                    ));
                }
            }
        }
        Ok(EnsembleState {
            weights,
            vectors,
            particles,
        })
    }

    pub fn pure(vector: Vec<f64>, particles: usize) -> Result<Self, EngineError> {
        EnsembleState::new(vec![1.0], vec![vector], particles)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    pub fn particles(&self) -> usize {
        self.particles
    }
}

impl ModelSpec {
    /// One-body density of an ensemble in this spec's sector.
    pub fn density_of(&self, state: &EnsembleState) -> Result<FineDensity, EngineError> {
        let m = self.grid.points();
        let h = self.grid.spacing();
        let mut rho = vec![0.0; m];
        match self.particles {
            1 => {
                for (w, vec) in state.weights().iter().zip(state.vectors()) {
                    for (i, x) in vec.iter().enumerate() {
                        rho[i] += w * x * x;
                    }
                }
            }
            _ => {
                let pb = PairBasis::new(m);
                for (w, vec) in state.weights().iter().zip(state.vectors()) {
                    for p in 0..pb.dim {
                        let x2 = w * vec[p] * vec[p];
                        rho[pb.first[p] as usize] += x2;
                        rho[pb.second[p] as usize] += x2;
                    }
                }
            }
        }
        for r in rho.iter_mut() {
            *r /= h;
        }
        Ok(FineDensity::new(self.grid, rho, self.particles)?)
    }

    /// Tr[Gamma (T + V_ee)]: expectation of the intrinsic operator.
    pub fn intrinsic_energy(&self, state: &EnsembleState) -> f64 {
        let zero = vec![0.0; self.grid.points()];
        let op = HamOp::new(self, &zero);
        state
            .weights()
            .iter()
            .zip(state.vectors())
            .map(|(w, v)| w * op.expectation(v))
            .sum()
    }
}

/// Ground-state intrinsic energy of N particles packed into a single level-n
/// cell behind hard walls. Infinite when the Pauli principle forbids the
/// packing (two fermions, one grid point).
pub fn f_max(spec: &ModelSpec, level: usize) -> Result<f64, EngineError> {
    let hier = spec.hierarchy();
    hier.check_level(level)?;
    let m = hier.points_per_cell(level);
    if spec.particles == 2 && m < 2 {
        return Ok(f64::INFINITY);
    }
    let h = spec.grid.spacing();
    let sub_grid = Grid::cell_box((m as f64 + 1.0) * h, m);
    let sub = ModelSpec {
        grid: sub_grid,
        particles: spec.particles,
        interaction: spec.interaction,
        softening: spec.softening,
    };
    lowest_energy_only(&sub, &vec![0.0; m])
}
