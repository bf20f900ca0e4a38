//! Dense linear algebra: thin SVD, truncation, pseudoinverse, and the SVD of a
//! product `K Qᵀ` computed from the factors without forming the product.
//!
//! The SVD is a one-sided Jacobi iteration on the `R` factor of a QR
//! decomposition (the QR comes from `nalgebra`).

mod jacobi;
mod matrix;

use alloc::format;
use alloc::vec::Vec;

pub use matrix::Matrix;
pub(crate) use matrix::dot;

use crate::error::{mismatch, Error, Result};

/// Thin singular value decomposition `M = U · diag(sigma) · Vᵀ`.
///
/// `u` is `m×r`, `v` is `n×r`, both with orthonormal columns, and `sigma` is
/// non-negative and sorted in descending order.
#[derive(Clone, Debug, PartialEq)]
pub struct SvdFactors {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub v: Matrix,
}

impl SvdFactors {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    pub fn reconstruct(&self) -> Matrix {
        self.u.scale_columns(&self.sigma).mul_t(&self.v)
    }

    /// Leading `r` left singular vectors.
    pub fn leading_u(&self, r: usize) -> Matrix {
        self.u.columns(0..r.min(self.rank()))
    }

    /// Leading `r` right singular vectors.
    pub fn leading_v(&self, r: usize) -> Matrix {
        self.v.columns(0..r.min(self.rank()))
    }

    /// Sum of the squared singular values with index `>= r` (0-based).
    pub fn tail_energy(&self, r: usize) -> f64 {
        self.sigma.iter().skip(r).map(|s| s * s).sum()
    }

    /// Sum of the squared leading `r` singular values.
    pub fn head_energy(&self, r: usize) -> f64 {
        self.sigma.iter().take(r).map(|s| s * s).sum()
    }
}

/// Thin SVD with `r = min(rows, cols)` singular triplets. Exactly zero
/// singular values get arbitrary orthonormal completions in `U` and `V`.
pub fn thin_svd(m: &Matrix) -> Result<SvdFactors> {
    jacobi::svd(m)
}

/// Singular values only, descending.
pub fn singular_values(m: &Matrix) -> Result<Vec<f64>> {
    jacobi::singular_values(m)
}

/// Largest singular value, as the square root of the top eigenvalue of the
/// smaller Gram matrix.
pub fn spectral_norm(m: &Matrix) -> Result<f64> {
    let gram = if m.rows() >= m.cols() { m.t_mul(m) } else { m.mul_t(m) };
    let top = gram
        .to_nalgebra()
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(0.0, f64::max);
    Ok(libm::sqrt(top))
}

/// Keeps the leading `rank` singular triplets.
pub fn truncate(f: &SvdFactors, rank: usize) -> Result<SvdFactors> {
    if rank == 0 {
        return Err(Error::InvalidRank {
            rank,
            max: f.rank(),
        });
    }
    if rank >= f.rank() {
        return Ok(f.clone());
    }
    Ok(SvdFactors {
        u: f.leading_u(rank),
        sigma: f.sigma[..rank].to_vec(),
        v: f.leading_v(rank),
    })
}

/// Default relative cutoff for [`pinv`]: `max(m, n) · ε`.
pub fn default_pinv_tol(rows: usize, cols: usize) -> f64 {
    rows.max(cols) as f64 * f64::EPSILON
}

/// Moore–Penrose pseudoinverse. Singular values `<= tol · σ_max` count as zero.
pub fn pinv(m: &Matrix, tol: f64) -> Result<Matrix> {
    Ok(pinv_from_svd(&thin_svd(m)?, tol))
}

/// [`pinv`] with the [`default_pinv_tol`] cutoff.
pub fn pinv_default(m: &Matrix) -> Result<Matrix> {
    pinv(m, default_pinv_tol(m.rows(), m.cols()))
}

/// Pseudoinverse `V · diag(1/σ) · Uᵀ` from an existing factorization.
pub fn pinv_from_svd(f: &SvdFactors, tol: f64) -> Matrix {
    let cutoff = tol * f.sigma.first().copied().unwrap_or(0.0);
    let inv: Vec<f64> = f
        .sigma
        .iter()
        .map(|&s| if s > cutoff && s > 0.0 { 1.0 / s } else { 0.0 })
        .collect();
    f.v.scale_columns(&inv).mul_t(&f.u)
}

/// SVD of `K · Qᵀ` for `K: T×d`, `Q: S×d`.
///
/// When both `T` and `S` exceed `d` the `T×S` product is never formed: with
/// `K = U_K Σ_K V_Kᵀ` and `Q = U_Q Σ_Q V_Qᵀ`, the `d×d` core
/// `C = Σ_K V_Kᵀ V_Q Σ_Q = U' Σ' V'ᵀ` gives `K Qᵀ = (U_K U') Σ' (U_Q V')ᵀ`,
/// for `O(T d²)` work. Otherwise the product is small and is decomposed
/// directly.
pub fn product_svd(k: &Matrix, q: &Matrix) -> Result<SvdFactors> {
    if k.cols() != q.cols() {
        return Err(mismatch(
            "product_svd",
            format!("K has {} columns, Q has {}", k.cols(), q.cols()),
        ));
    }
    let d = k.cols();
    if k.rows().min(q.rows()) <= d {
        return thin_svd(&k.mul_t(q));
    }
    let fk = thin_svd(k)?;
    let fq = thin_svd(q)?;
    let core = fk
        .v
        .t_mul(&fq.v)
        .scale_rows(&fk.sigma)
        .scale_columns(&fq.sigma);
    let fc = thin_svd(&core)?;
    Ok(SvdFactors {
        u: fk.u.mul(&fc.u),
        sigma: fc.sigma,
        v: fq.u.mul(&fc.v),
    })
}

/// Squared relative Frobenius error `‖M − M̃‖²_F / ‖M‖²_F`.
pub fn rel_fro_err(reference: &Matrix, approx: &Matrix) -> Result<f64> {
    if reference.shape() != approx.shape() {
        return Err(mismatch(
            "rel_fro_err",
            format!("{:?} vs {:?}", reference.shape(), approx.shape()),
        ));
    }
    let denom = reference.fro_norm_sq();
    if denom == 0.0 {
        return Err(Error::ZeroReference);
    }
    Ok(reference.sub(approx).fro_norm_sq() / denom)
}

/// `‖X · Yᵀ‖²_F` computed as `⟨XᵀX, YᵀY⟩` without forming the product.
pub fn product_fro_sq(x: &Matrix, y: &Matrix) -> f64 {
    assert_eq!(x.cols(), y.cols(), "column counts differ in product_fro_sq");
    let gx = x.t_mul(x);
    let gy = y.t_mul(y);
    dot(gx.as_slice(), gy.as_slice()).max(0.0)
}
