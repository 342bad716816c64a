//! Minimum-norm least squares via a one-sided Jacobi SVD.
//!
//! The disaggregation step solves one tall linear system per attack round
//! with many right-hand sides, so `lstsq` factors the coefficient matrix once
//! and applies the pseudo-inverse to every column. Jacobi iteration is chosen
//! over Householder QR because it yields the full singular spectrum, which
//! doubles as the conditioning diagnostic the attack needs.

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Relative cutoff under which trailing singular values are treated as zero.
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

const MAX_SWEEPS: usize = 64;
const ROTATION_TOL: f64 = 1e-14;

/// Thin singular value decomposition `a = u * diag(sigma) * v^T`.
///
/// `u` is p×q and `v` is q×q where q <= p; callers with wide matrices
/// transpose first.
struct Svd {
    u: Matrix,
    sigma: Vec<f64>,
    v: Matrix,
}

/// One-sided Jacobi: rotate column pairs of a working copy until all pairs
/// are orthogonal, accumulating the rotations into `v`.
fn jacobi_svd(a: &Matrix) -> Svd {
    let (p, q) = (a.rows(), a.cols());
    debug_assert!(p >= q);
    let mut b = a.clone();
    let mut v = Matrix::identity(q);

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..q {
            for j in (i + 1)..q {
                let mut aii = 0.0;
                let mut ajj = 0.0;
                let mut aij = 0.0;
                for r in 0..p {
                    let bi = b.get(r, i);
                    let bj = b.get(r, j);
                    aii += bi * bi;
                    ajj += bj * bj;
                    aij += bi * bj;
                }
                if aij.abs() <= ROTATION_TOL * (aii * ajj).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (ajj - aii) / (2.0 * aij);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                for r in 0..p {
                    let bi = b.get(r, i);
                    let bj = b.get(r, j);
                    b.set(r, i, cs * bi - sn * bj);
                    b.set(r, j, sn * bi + cs * bj);
                }
                for r in 0..q {
                    let vi = v.get(r, i);
                    let vj = v.get(r, j);
                    v.set(r, i, cs * vi - sn * vj);
                    v.set(r, j, sn * vi + cs * vj);
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let mut order: Vec<usize> = (0..q).collect();
    let norms: Vec<f64> = (0..q)
        .map(|c| (0..p).map(|r| b.get(r, c).powi(2)).sum::<f64>().sqrt())
        .collect();
    order.sort_by(|&x, &y| norms[y].partial_cmp(&norms[x]).unwrap());

    let mut u = Matrix::zeros(p, q);
    let mut vs = Matrix::zeros(q, q);
    let mut sigma = vec![0.0; q];
    for (dst, &src) in order.iter().enumerate() {
        sigma[dst] = norms[src];
        if norms[src] > 0.0 {
            for r in 0..p {
                u.set(r, dst, b.get(r, src) / norms[src]);
            }
        }
        for r in 0..q {
            vs.set(r, dst, v.get(r, src));
        }
    }
    Svd { u, sigma, v: vs }
}

/// Result of a least-squares solve, with conditioning diagnostics.
#[derive(Debug, Clone)]
pub struct LstsqResult {
    /// The q×r minimizer of ||a·x − rhs|| (minimum-norm when rank-deficient).
    pub x: Matrix,
    /// Singular values of `a`, descending.
    pub singular_values: Vec<f64>,
    /// smallest singular value / largest; 0 for a zero matrix.
    pub rcond: f64,
    /// Number of singular values above `rank_tol` relative to the largest.
    pub rank: usize,
    /// True when `a` is numerically rank-deficient at `rank_tol`.
    pub ill_conditioned: bool,
}

/// Reciprocal condition number (smallest singular value over largest) of a
/// matrix; 0 for a zero matrix. Shares the SVD machinery with [`lstsq`].
pub fn rcond_estimate(a: &Matrix) -> Result<f64> {
    if a.rows() == 0 || a.cols() == 0 {
        return Err(Error::Shape("condition estimate on empty matrix".into()));
    }
    let work = if a.rows() < a.cols() { a.transpose() } else { a.clone() };
    let svd = jacobi_svd(&work);
    let largest = svd.sigma[0];
    if largest == 0.0 {
        return Ok(0.0);
    }
    Ok(svd.sigma[svd.sigma.len() - 1] / largest)
}

/// Minimum-norm least squares: minimize the Frobenius norm of `a·x − rhs`.
///
/// One factorization serves all `rhs` columns. A rank-deficient `a` is not an
/// error; the result is flagged and the minimum-norm solution returned, with
/// components along null directions truncated.
pub fn lstsq(a: &Matrix, rhs: &Matrix, rank_tol: f64) -> Result<LstsqResult> {
    if a.rows() == 0 || a.cols() == 0 {
        return Err(Error::Shape("lstsq on empty matrix".into()));
    }
    if rhs.rows() != a.rows() {
        return Err(Error::Shape(format!(
            "lstsq: rhs has {} rows, coefficient matrix has {}",
            rhs.rows(),
            a.rows()
        )));
    }

    let tall = a.rows() >= a.cols();
    let svd = if tall {
        jacobi_svd(a)
    } else {
        jacobi_svd(&a.transpose())
    };

    let sigma_max = svd.sigma[0];
    let sigma_min = *svd.sigma.last().unwrap();
    let rcond = if sigma_max > 0.0 {
        sigma_min / sigma_max
    } else {
        0.0
    };
    let rank = svd
        .sigma
        .iter()
        .filter(|&&s| s > rank_tol * sigma_max)
        .count();
    let full = a.rows().min(a.cols());

    // a = U S V^T for tall a, a = V S U^T for wide a; either way the
    // pseudo-inverse applies U^T or V^T to rhs, scales by 1/sigma over the
    // retained spectrum, and maps back.
    let (left, right) = if tall { (&svd.u, &svd.v) } else { (&svd.v, &svd.u) };
    let mut t = left.transpose().matmul(rhs)?;
    for (i, &s) in svd.sigma.iter().enumerate() {
        let inv = if s > rank_tol * sigma_max { 1.0 / s } else { 0.0 };
        for j in 0..t.cols() {
            let v = t.get(i, j) * inv;
            t.set(i, j, v);
        }
    }
    let x = right.matmul(&t)?;

    Ok(LstsqResult {
        x,
        singular_values: svd.sigma,
        rcond,
        rank,
        ill_conditioned: rank < full,
    })
}
