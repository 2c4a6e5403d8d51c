//! Deflated Lanczos iteration for the lowest eigenpairs of a large symmetric
//! operator, used when the two-particle pair basis is too big to materialize.
//!
//! One eigenpair is extracted per sweep; previously found vectors (and any
//! caller-supplied deflation space) are projected out of every Krylov vector,
//! so degenerate partners are found by successive deflated sweeps rather than
//! by hoping rounding noise splits a single Krylov space. Full
//! reorthogonalization keeps the basis clean; restarts collapse the space
//! onto the current best Ritz vector when the basis fills up.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const MAX_BASIS: usize = 240;
const MAX_RESTARTS: usize = 60;
const CHECK_FROM: usize = 10;
const CHECK_EVERY: usize = 5;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn scale(a: &mut [f64], s: f64) {
    for v in a.iter_mut() {
        *v *= s;
    }
}

/// Remove the components of `v` along every vector in `basis_sets` (two
/// passes for numerical hygiene). Returns the remaining norm.
fn orthogonalize(v: &mut [f64], basis_sets: &[&[Vec<f64>]]) -> f64 {
    for _ in 0..2 {
        for set in basis_sets {
            for b in set.iter() {
                let c = dot(v, b);
                if c != 0.0 {
                    axpy(v, -c, b);
                }
            }
        }
    }
    norm(v)
}

/// Lowest eigenpair of the symmetric tridiagonal matrix given by `alpha`
/// (diagonal) and `beta` (subdiagonal).
fn tridiag_lowest(alpha: &[f64], beta: &[f64]) -> (f64, Vec<f64>) {
    let m = alpha.len();
    let mut t = DMatrix::<f64>::zeros(m, m);
    for i in 0..m {
        t[(i, i)] = alpha[i];
        if i + 1 < m {
            t[(i, i + 1)] = beta[i];
            t[(i + 1, i)] = beta[i];
        }
    }
    let se = SymmetricEigen::new(t);
    let mut best = 0;
    for k in 1..m {
        if se.eigenvalues[k] < se.eigenvalues[best] {
            best = k;
        }
    }
    let v = se.eigenvectors.column(best).iter().copied().collect();
    (se.eigenvalues[best], v)
}

fn random_vector(dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..dim).map(|_| rng.random::<f64>() - 0.5).collect()
}

/// Lowest `count` eigenpairs of the operator `apply`, orthogonal to
/// `deflate`. `warm` seeds the sweeps (one vector per wanted pair, best
/// effort); `seed` makes the random fallback deterministic. The residual
/// target is `tol * max(1, |theta|)` per pair.
pub(crate) fn lowest_eigenpairs(
    dim: usize,
    mut apply: impl FnMut(&[f64], &mut [f64]),
    count: usize,
    deflate: &[Vec<f64>],
    warm: &[Vec<f64>],
    seed: u64,
    tol: f64,
) -> Result<Vec<(f64, Vec<f64>)>, String> {
    let free = dim.saturating_sub(deflate.len());
    let count = count.min(free);
    let mut found: Vec<(f64, Vec<f64>)> = Vec::with_capacity(count);

    for s in 0..count {
        let found_vecs: Vec<Vec<f64>> = found.iter().map(|(_, v)| v.clone()).collect();
        let mut start = match warm.get(s) {
            Some(w) if w.len() == dim => w.clone(),
            _ => random_vector(dim, seed.wrapping_add(s as u64)),
        };
        let mut tries = 0;
        loop {
            let n = orthogonalize(&mut start, &[deflate, &found_vecs]);
            if n > 1e-10 {
                scale(&mut start, 1.0 / n);
                break;
            }
            tries += 1;
            if tries > 8 {
                return Err("could not seed a vector outside the deflation space".into());
            }
            start = random_vector(dim, seed.wrapping_add(0x9e37_79b9 + tries * 131 + s as u64));
        }

        let mut converged = None;
        'outer: for restart in 0..MAX_RESTARTS {
            let mut basis: Vec<Vec<f64>> = vec![start.clone()];
            let mut alphas: Vec<f64> = Vec::new();
            let mut betas: Vec<f64> = Vec::new();
            let cap = MAX_BASIS.min(dim - deflate.len() - found.len());

            for j in 0..cap {
                let mut w = vec![0.0; dim];
                apply(&basis[j], &mut w);
                let a = dot(&w, &basis[j]);
                alphas.push(a);
                axpy(&mut w, -a, &basis[j]);
                if j > 0 {
                    let b = betas[j - 1];
                    axpy(&mut w, -b, &basis[j - 1]);
                }
                let bn = orthogonalize(&mut w, &[deflate, &found_vecs, &basis]);

                let exhausted = j + 1 == cap || bn <= 1e-12 * (1.0 + a.abs());
                let do_check =
                    exhausted || (j + 1 >= CHECK_FROM && (j + 1) % CHECK_EVERY == 0);
                if do_check {
                    let (theta, sv) = tridiag_lowest(&alphas, &betas);
                    let residual = bn * sv.last().copied().unwrap_or(1.0).abs();
                    if residual <= tol * theta.abs().max(1.0) || (exhausted && bn <= 1e-12) {
                        let mut x = vec![0.0; dim];
                        for (k, b) in basis.iter().enumerate() {
                            axpy(&mut x, sv[k], b);
                        }
                        let n = orthogonalize(&mut x, &[deflate, &found_vecs]);
                        if n > 1e-10 {
                            scale(&mut x, 1.0 / n);
                            converged = Some((theta, x));
                            break 'outer;
                        }
                    }
                    if exhausted {
                        // collapse onto the best Ritz vector and restart
                        let mut x = vec![0.0; dim];
                        for (k, b) in basis.iter().enumerate() {
                            axpy(&mut x, sv[k], b);
                        }
                        let n = orthogonalize(&mut x, &[deflate, &found_vecs]);
                        if n <= 1e-10 {
                            x = random_vector(
                                dim,
                                seed.wrapping_add(0x5851_f42d + restart as u64),
                            );
                            let n2 = orthogonalize(&mut x, &[deflate, &found_vecs]);
                            scale(&mut x, 1.0 / n2);
                        } else {
                            scale(&mut x, 1.0 / n);
                        }
                        start = x;
                        break;
                    }
                }
                if bn <= 1e-12 * (1.0 + a.abs()) {
                    break; // invariant subspace handled above
                }
                betas.push(bn);
                let mut next = w;
                scale(&mut next, 1.0 / bn);
                basis.push(next);
            }
        }

        match converged {
            Some((theta, x)) => found.push((theta, x)),
            None => return Err(format!("Lanczos sweep {s} did not converge")),
        }
    }

    found.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(found)
}
