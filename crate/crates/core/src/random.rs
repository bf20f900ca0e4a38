//! Seeded random matrices for synthetic caches and randomized checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::linalg::{thin_svd, Matrix};

/// Deterministic RNG for `seed`, on a separate ChaCha stream per `stream`.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Matrix with i.i.d. standard normal entries.
pub fn gaussian_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// `rows×cols` matrix with orthonormal columns (`rows >= cols`), drawn from
/// the Haar measure up to the sign convention of the SVD.
pub fn orthonormal_columns<R: Rng + ?Sized>(
    rng: &mut R,
    rows: usize,
    cols: usize,
) -> Result<Matrix> {
    assert!(rows >= cols, "cannot fit {cols} orthonormal columns in R^{rows}");
    polar_factor(&gaussian_matrix(rng, rows, cols))
}

/// Nearest matrix with orthonormal columns, `U Vᵀ` from the thin SVD.
pub fn polar_factor(m: &Matrix) -> Result<Matrix> {
    let f = thin_svd(m)?;
    Ok(f.u.mul_t(&f.v))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orthonormal_and_reproducible() {
        let q1 = orthonormal_columns(&mut seeded_rng(3, 0), 9, 4).unwrap();
        let q2 = orthonormal_columns(&mut seeded_rng(3, 0), 9, 4).unwrap();
        assert_eq!(q1, q2);
        let gram = q1.t_mul(&q1);
        assert!(gram.sub(&Matrix::identity(4)).max_abs() < 1e-13);
        let other = orthonormal_columns(&mut seeded_rng(3, 1), 9, 4).unwrap();
        assert_ne!(q1, other);
    }
}
