//! One-sided (Hestenes) Jacobi SVD, applied to the triangular factor of a
//! Householder QR.
//!
//! Columns of `R` are rotated pairwise until mutually orthogonal; their norms
//! are the singular values and the accumulated rotations form `V`. This is
//! slower than bidiagonal QR but has high relative accuracy and handles
//! rank-deficient inputs without special cases.

use alloc::vec;
use alloc::vec::Vec;

use super::matrix::dot;
use super::{Matrix, SvdFactors};
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 80;

/// Column-major square working copy.
struct Columns {
    n: usize,
    data: Vec<f64>,
}

impl Columns {
    fn col(&self, j: usize) -> &[f64] {
        &self.data[j * self.n..(j + 1) * self.n]
    }

    fn rotate(&mut self, p: usize, q: usize, c: f64, s: f64) {
        let n = self.n;
        let (lo, hi) = self.data.split_at_mut(q * n);
        let cp = &mut lo[p * n..(p + 1) * n];
        let cq = &mut hi[..n];
        for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
            let (a, b) = (*x, *y);
            *x = c * a - s * b;
            *y = s * a + c * b;
        }
    }
}

/// Orthogonalizes the columns of the square matrix `r` in place, returning
/// the rotated columns and, if requested, the accumulated rotation.
fn orthogonalize(r: Columns, want_v: bool, rows: usize, cols: usize) -> Result<(Columns, Option<Columns>)> {
    let n = r.n;
    let mut a = r;
    let mut v = want_v.then(|| {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Columns { n, data }
    });
    let tol = n.max(1) as f64 * f64::EPSILON;
    let mut norms: Vec<f64> = (0..n).map(|j| dot(a.col(j), a.col(j))).collect();
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta) = (norms[p], norms[q]);
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let gamma = dot(a.col(p), a.col(q));
                if gamma.abs() <= tol * libm::sqrt(alpha) * libm::sqrt(beta) {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + libm::sqrt(1.0 + zeta * zeta));
                let c = 1.0 / libm::sqrt(1.0 + t * t);
                let s = c * t;
                a.rotate(p, q, c, s);
                if let Some(v) = v.as_mut() {
                    v.rotate(p, q, c, s);
                }
                norms[p] = (alpha - t * gamma).max(0.0);
                norms[q] = beta + t * gamma;
            }
        }
        if !rotated {
            return Ok((a, v));
        }
        for (j, nj) in norms.iter_mut().enumerate() {
            *nj = dot(a.col(j), a.col(j));
        }
    }
    Err(Error::SvdNoConvergence { rows, cols })
}

/// Appends unit vectors orthogonal to `basis` until it has `n` columns.
fn complete_basis(basis: &mut Vec<Vec<f64>>, n: usize) {
    let mut candidate = 0;
    while basis.len() < n && candidate < n {
        let mut e = vec![0.0; n];
        e[candidate] = 1.0;
        candidate += 1;
        for _ in 0..2 {
            for b in basis.iter() {
                let proj = dot(&e, b);
                for (x, y) in e.iter_mut().zip(b) {
                    *x -= proj * y;
                }
            }
        }
        let norm = libm::sqrt(dot(&e, &e));
        if norm > 0.5 {
            e.iter_mut().for_each(|x| *x /= norm);
            basis.push(e);
        }
    }
}

fn from_columns(cols: &[Vec<f64>], rows: usize) -> Matrix {
    Matrix::from_fn(rows, cols.len(), |r, c| cols[c][r])
}

/// SVD of a tall or square matrix (`rows >= cols`).
fn tall_svd(m: &Matrix, want_vectors: bool) -> Result<(Option<Matrix>, Vec<f64>, Option<Matrix>)> {
    let (rows, cols) = m.shape();
    let qr = m.to_nalgebra().qr();
    let r = qr.r();
    let n = cols;
    let mut data = vec![0.0; n * n];
    for j in 0..n {
        for i in 0..n {
            data[j * n + i] = r[(i, j)];
        }
    }
    let (a, v) = orthogonalize(Columns { n, data }, want_vectors, rows, cols)?;

    let norms: Vec<f64> = (0..n).map(|j| libm::sqrt(dot(a.col(j), a.col(j)))).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));
    let sigma: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    if !want_vectors {
        return Ok((None, sigma, None));
    }

    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    for &j in &order {
        if norms[j] > 0.0 {
            u_cols.push(a.col(j).iter().map(|x| x / norms[j]).collect());
        }
    }
    complete_basis(&mut u_cols, n);
    let u_r = from_columns(&u_cols, n);
    let v = v.expect("requested");
    let v_cols: Vec<Vec<f64>> = order.iter().map(|&j| v.col(j).to_vec()).collect();

    let q = Matrix::from_nalgebra(&qr.q());
    Ok((Some(q.mul(&u_r)), sigma, Some(from_columns(&v_cols, n))))
}

pub(super) fn svd(m: &Matrix) -> Result<SvdFactors> {
    if m.rows() >= m.cols() {
        let (u, sigma, v) = tall_svd(m, true)?;
        Ok(SvdFactors {
            u: u.expect("requested"),
            sigma,
            v: v.expect("requested"),
        })
    } else {
        let (v, sigma, u) = tall_svd(&m.transpose(), true)?;
        Ok(SvdFactors {
            u: u.expect("requested"),
            sigma,
            v: v.expect("requested"),
        })
    }
}

pub(super) fn singular_values(m: &Matrix) -> Result<Vec<f64>> {
    if m.rows() >= m.cols() {
        Ok(tall_svd(m, false)?.1)
    } else {
        Ok(tall_svd(&m.transpose(), false)?.1)
    }
}
