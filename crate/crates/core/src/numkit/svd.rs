//! Thin SVD by one-sided (Hestenes) Jacobi rotations, and the truncated
//! factorization built on it.

use super::matrix::{dot, Matrix};
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 100;
const OFF_DIAGONAL_TOL: f64 = 1e-12;

/// `m = u · diag(s) · vᵀ` with `u: d×n`, `v: k×n`, `n = min(d, k)`.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub v: Matrix,
}

impl Svd {
    pub fn reconstruct(&self) -> Matrix {
        let n = self.s.len();
        let us = Matrix::from_fn(self.u.rows(), n, |i, j| self.u[(i, j)] * self.s[j]);
        us.matmul_t(&self.v).expect("svd factors conform")
    }
}

pub fn svd_thin(m: &Matrix) -> Result<Svd> {
    if m.is_empty() {
        return Err(Error::arg("svd of an empty matrix"));
    }
    if !m.is_finite() {
        return Err(Error::Numerical("svd of a matrix with non-finite entries".into()));
    }
    if m.rows() < m.cols() {
        let t = svd_tall(&m.transpose())?;
        return Ok(Svd {
            u: t.v,
            s: t.s,
            v: t.u,
        });
    }
    svd_tall(m)
}

/// Requires `rows >= cols`.
fn svd_tall(m: &Matrix) -> Result<Svd> {
    let (d, k) = m.shape();
    // Column-major working copies: columns of `m` rotate into `U·S`, identity rotates into `V`.
    let mut work: Vec<Vec<f64>> = (0..k).map(|j| m.col(j)).collect();
    let mut vcols: Vec<Vec<f64>> = (0..k)
        .map(|j| {
            let mut e = vec![0.0; k];
            e[j] = 1.0;
            e
        })
        .collect();

    let mut converged = k < 2;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..k {
            for q in (p + 1)..k {
                let alpha = dot(&work[p], &work[p]);
                let beta = dot(&work[q], &work[q]);
                let gamma = dot(&work[p], &work[q]);
                if gamma == 0.0 || alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                if gamma.abs() <= OFF_DIAGONAL_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut work, p, q, c, s);
                rotate(&mut vcols, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
        }
    }
    if !converged {
        return Err(Error::Numerical(format!(
            "jacobi svd did not converge in {MAX_SWEEPS} sweeps for {d}x{k} input"
        )));
    }

    let norms: Vec<f64> = work.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..k).collect();
    // Stable sort keeps ties in original column order.
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]));

    let smax = norms[order[0]];
    let negligible = smax * (d.max(k) as f64) * f64::EPSILON;
    let mut ucols: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut pending = Vec::new();
    let mut s = Vec::with_capacity(k);
    for (slot, &j) in order.iter().enumerate() {
        s.push(norms[j]);
        if norms[j] > negligible && norms[j] > 0.0 {
            ucols.push(work[j].iter().map(|v| v / norms[j]).collect());
        } else {
            ucols.push(vec![0.0; d]);
            pending.push(slot);
        }
    }
    complete_basis(&mut ucols, &pending);

    let u = Matrix::from_fn(d, k, |i, j| ucols[j][i]);
    let v = Matrix::from_fn(k, k, |i, j| vcols[order[j]][i]);
    Ok(Svd { u, s, v })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let cp = &mut left[p];
    let cq = &mut right[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let a = *x;
        let b = *y;
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Fills the listed slots with unit vectors orthogonal to every other column.
///
/// Each slot takes the coordinate axis with the largest component outside the
/// span of the columns filled so far. With orthonormal filled columns that
/// component is at least `sqrt(missing / d)`, so a slot is always found.
fn complete_basis(cols: &mut [Vec<f64>], pending: &[usize]) {
    if pending.is_empty() {
        return;
    }
    let d = cols[0].len();
    let mut filled: Vec<bool> = vec![true; cols.len()];
    for &p in pending {
        filled[p] = false;
    }
    for &slot in pending {
        let mut best = (f64::NEG_INFINITY, Vec::new());
        for axis in 0..d {
            let mut e = vec![0.0; d];
            e[axis] = 1.0;
            // Two passes of Gram-Schmidt.
            for _ in 0..2 {
                for (j, col) in cols.iter().enumerate() {
                    if !filled[j] {
                        continue;
                    }
                    let proj = dot(&e, col);
                    for (x, c) in e.iter_mut().zip(col) {
                        *x -= proj * c;
                    }
                }
            }
            let norm = dot(&e, &e).sqrt();
            if norm > best.0 {
                best = (norm, e);
            }
        }
        let (norm, e) = best;
        cols[slot] = e.iter().map(|x| x / norm).collect();
        filled[slot] = true;
    }
}

/// Best rank-`r` factorization `m ≈ b · a` with `b: d×r`, `a: r×k`.
///
/// The singular values are split evenly: `b = U_r·√S_r`, `a = √S_r·V_rᵀ`.
pub fn truncated_factor(m: &Matrix, r: usize) -> Result<(Matrix, Matrix)> {
    let (d, k) = m.shape();
    if r == 0 || r > d.min(k) {
        return Err(Error::arg(format!(
            "truncation rank {r} outside [1, {}] for {d}x{k} matrix",
            d.min(k)
        )));
    }
    let svd = svd_thin(m)?;
    let roots: Vec<f64> = svd.s[..r].iter().map(|s| s.sqrt()).collect();
    let b = Matrix::from_fn(d, r, |i, j| svd.u[(i, j)] * roots[j]);
    let a = Matrix::from_fn(r, k, |i, j| roots[i] * svd.v[(j, i)]);
    Ok((b, a))
}

/// Count of singular values above `rel_tol · s_max`.
pub fn numerical_rank(s: &[f64], rel_tol: f64) -> usize {
    let smax = s.first().copied().unwrap_or(0.0);
    if smax <= 0.0 {
        return 0;
    }
    s.iter().filter(|&&v| v > rel_tol * smax).count()
}
