#![allow(dead_code)]

use kqsvd_core::random::{gaussian_matrix, orthonormal_columns, seeded_rng};
use kqsvd_core::Matrix;

pub fn gaussian(seed: u64, stream: u64, rows: usize, cols: usize) -> Matrix {
    gaussian_matrix(&mut seeded_rng(seed, stream), rows, cols)
}

/// `rows×cols` Gaussian product of inner dimension `rank`.
pub fn low_rank(seed: u64, stream: u64, rows: usize, cols: usize, rank: usize) -> Matrix {
    let mut rng = seeded_rng(seed, stream);
    let x = gaussian_matrix(&mut rng, rows, rank);
    let y = gaussian_matrix(&mut rng, cols, rank);
    x.mul_t(&y)
}

pub fn orthonormal(seed: u64, stream: u64, rows: usize, cols: usize) -> Matrix {
    orthonormal_columns(&mut seeded_rng(seed, stream), rows, cols).unwrap()
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, descending.
pub fn jacobi_eigenvalues(m: &Matrix) -> Vec<f64> {
    let n = m.rows();
    assert_eq!(n, m.cols());
    let mut a: Vec<Vec<f64>> = (0..n).map(|r| m.row(r).to_vec()).collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        let diag: f64 = (0..n).map(|i| a[i][i] * a[i][i]).sum();
        if off <= 1e-30 * diag.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q] == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for row in a.iter_mut() {
                    let (akp, akq) = (row[p], row[q]);
                    row[p] = c * akp - s * akq;
                    row[q] = s * akp + c * akq;
                }
                let (row_p, row_q) = (a[p].clone(), a[q].clone());
                for (k, (apk, aqk)) in row_p.into_iter().zip(row_q).enumerate() {
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    ev
}

/// Singular values from the eigenvalues of the smaller Gram matrix.
pub fn gram_singular_values(m: &Matrix) -> Vec<f64> {
    let gram = if m.rows() >= m.cols() { m.t_mul(m) } else { m.mul_t(m) };
    jacobi_eigenvalues(&gram)
        .into_iter()
        .map(|e| e.max(0.0).sqrt())
        .collect()
}

/// `Σ_{i>rank} σ_i²` of an explicitly formed matrix.
pub fn explicit_tail(m: &Matrix, rank: usize) -> f64 {
    kqsvd_core::linalg::singular_values(m)
        .unwrap()
        .iter()
        .skip(rank)
        .map(|s| s * s)
        .sum()
}

pub fn rel_close(got: f64, want: f64, tol: f64) -> bool {
    (got - want).abs() <= tol * want.abs().max(f64::MIN_POSITIVE)
}

/// `‖K S Qᵀ − K Qᵀ‖²_F` with the product formed explicitly.
pub fn explicit_score_error(k: &Matrix, q: &Matrix, s: &Matrix) -> f64 {
    k.mul(s).mul_t(q).sub(&k.mul_t(q)).fro_norm_sq()
}
