//! Spectral-radius estimation for (possibly nonsymmetric) square matrices.
//!
//! Plain power iteration stalls when the dominant eigenvalue of a real matrix
//! is a complex-conjugate pair: the iterate rotates inside a two-dimensional
//! invariant subspace. Each iteration here therefore projects the matrix onto
//! the Krylov pair span{x, Wx} and takes the largest-modulus eigenvalue of
//! the 2×2 projection, which is exact for both a real dominant eigenvalue and
//! a dominant conjugate pair once the iterate has converged into the
//! corresponding invariant subspace. When several eigenvalues share nearly
//! the dominant modulus that iterate converges too slowly, so an unconverged
//! run falls back to orthogonal subspace iteration with Ritz values.

use crate::error::{Error, Result};
use crate::numerics::matrix::{dot, norm, Matrix};
use crate::numerics::rng::Rng;
use crate::scalar::Scalar;

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 10_000;

const START_SEED: u64 = 0x5EED_0000_0000_0001;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpectralEstimate {
    pub radius: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Estimates `|λ_max|`. Convergence is declared when two successive
/// estimates differ by less than `tol` relative to the estimate. If the
/// first start vector has not converged after half the budget, a fresh
/// seeded start vector is drawn once and iteration resumes. If neither start
/// converges, the remaining budget goes to block subspace iteration.
pub fn power_iteration<T: Scalar>(m: &Matrix<T>, tol: f64, max_iter: usize) -> Result<SpectralEstimate> {
    let n = m.rows();
    if n == 0 || m.cols() != n {
        return Err(Error::dim(format!(
            "power_iteration needs a square matrix, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    if !(tol > 0.0) {
        return Err(Error::Range(format!("tol must be positive, got {tol}")));
    }
    let a: Vec<f64> = m.as_slice().iter().map(|v| v.to_f64_lossy()).collect();
    let matvec = |v: &[f64]| -> Vec<f64> { (0..n).map(|i| dot(&a[i * n..(i + 1) * n], v)).collect() };

    let mut rng = Rng::new(START_SEED, 0);
    let mut total_iters = 0;
    let mut best = 0.0;
    let attempts = [max_iter / 2, max_iter - max_iter / 2];
    for (attempt, &budget) in attempts.iter().enumerate() {
        let mut x: Vec<f64> = (0..n).map(|_| rng.standard_normal()).collect();
        let nx = norm(&x);
        x.iter_mut().for_each(|v| *v /= nx);
        let mut y = matvec(&x);
        let mut prev = f64::NAN;
        for _ in 0..budget {
            total_iters += 1;
            let ny = norm(&y);
            if ny == 0.0 {
                // x fell into the null space; redraw, or report zero on the second try.
                if attempt == 0 {
                    break;
                }
                return Ok(SpectralEstimate {
                    radius: 0.0,
                    iterations: total_iters,
                    converged: true,
                });
            }
            let z = matvec(&y);
            let est = krylov_pair_radius(&x, &y, &z);
            best = est;
            if (est - prev).abs() < tol * est.max(f64::MIN_POSITIVE) {
                return Ok(SpectralEstimate {
                    radius: est,
                    iterations: total_iters,
                    converged: true,
                });
            }
            prev = est;
            x = y.iter().map(|v| v / ny).collect();
            y = z.iter().map(|v| v / ny).collect();
        }
    }
    if n > 2 && max_iter >= 2 * BLOCK_MIN_ITER {
        let est = subspace_radius(&a, n, tol, max_iter, &mut rng);
        if est.converged {
            return Ok(SpectralEstimate {
                iterations: total_iters + est.iterations,
                ..est
            });
        }
        best = est.radius;
        total_iters += est.iterations;
    }
    Ok(SpectralEstimate {
        radius: best,
        iterations: total_iters,
        converged: false,
    })
}

const BLOCK_WIDTH: usize = 16;
const BLOCK_MIN_ITER: usize = 8;

/// Modified Gram-Schmidt on the columns of a row-major `n × p` block.
fn orthonormalize(q: &mut [f64], n: usize, p: usize) {
    for j in 0..p {
        for k in 0..j {
            let d: f64 = (0..n).map(|i| q[i * p + j] * q[i * p + k]).sum();
            for i in 0..n {
                q[i * p + j] -= d * q[i * p + k];
            }
        }
        let nrm = (0..n).map(|i| q[i * p + j] * q[i * p + j]).sum::<f64>().sqrt();
        if nrm > 0.0 {
            for i in 0..n {
                q[i * p + j] /= nrm;
            }
        }
    }
}

/// Orthogonal iteration on a `BLOCK_WIDTH`-dimensional subspace; the
/// estimate is the largest modulus among eigenvalues of Qᵀ A Q.
fn subspace_radius(a: &[f64], n: usize, tol: f64, max_iter: usize, rng: &mut Rng) -> SpectralEstimate {
    let p = BLOCK_WIDTH.min(n);
    let mut q: Vec<f64> = (0..n * p).map(|_| rng.standard_normal()).collect();
    orthonormalize(&mut q, n, p);
    let apply = |q: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; n * p];
        for i in 0..n {
            let row = &a[i * n..(i + 1) * n];
            let dst = &mut out[i * p..(i + 1) * p];
            for (k, &aik) in row.iter().enumerate() {
                if aik != 0.0 {
                    let src = &q[k * p..(k + 1) * p];
                    dst.iter_mut().zip(src).for_each(|(d, s)| *d += aik * s);
                }
            }
        }
        out
    };
    let mut prev = f64::NAN;
    let mut est = 0.0;
    let budget = max_iter / BLOCK_WIDTH.min(n).max(1);
    for it in 1..=budget.max(BLOCK_MIN_ITER) {
        let aq = apply(&q);
        let mut h = nalgebra::DMatrix::<f64>::zeros(p, p);
        for r in 0..p {
            for c in 0..p {
                h[(r, c)] = (0..n).map(|i| q[i * p + r] * aq[i * p + c]).sum();
            }
        }
        est = h.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max);
        if it >= BLOCK_MIN_ITER && (est - prev).abs() < tol * est.max(f64::MIN_POSITIVE) {
            return SpectralEstimate {
                radius: est,
                iterations: it,
                converged: true,
            };
        }
        prev = est;
        q = aq;
        orthonormalize(&mut q, n, p);
    }
    SpectralEstimate {
        radius: est,
        iterations: budget,
        converged: false,
    }
}

/// Largest eigenvalue modulus of W projected onto span{x, y} where x is a
/// unit vector, y = Wx and z = Wy.
fn krylov_pair_radius(x: &[f64], y: &[f64], z: &[f64]) -> f64 {
    let alpha = dot(x, y);
    let r: Vec<f64> = y.iter().zip(x).map(|(yi, xi)| yi - alpha * xi).collect();
    let nr = norm(&r);
    if nr <= 1e-13 * norm(y) {
        return alpha.abs();
    }
    let q2: Vec<f64> = r.iter().map(|v| v / nr).collect();
    // W q2 = (Wy − α Wx) / ‖r‖ = (z − α y) / ‖r‖
    let wq2: Vec<f64> = z.iter().zip(y).map(|(zi, yi)| (zi - alpha * yi) / nr).collect();
    let h11 = alpha;
    let h12 = dot(x, &wq2);
    let h21 = dot(&q2, y);
    let h22 = dot(&q2, &wq2);
    let tr = h11 + h22;
    let det = h11 * h22 - h12 * h21;
    let disc = tr * tr / 4.0 - det;
    if disc >= 0.0 {
        let s = disc.sqrt();
        (tr / 2.0 + s).abs().max((tr / 2.0 - s).abs())
    } else {
        det.abs().sqrt()
    }
}
