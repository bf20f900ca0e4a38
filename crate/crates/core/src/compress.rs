//! Rank-`R` key and value projections.
//!
//! Two shapes of result exist:
//!
//! * [`Projection`]: an orthonormal `d×R` basis `V̂` whose projector `V̂V̂ᵀ` is
//!   applied to both keys and queries (K-SVD and Eigen).
//! * [`FactorPair`]: two `d×R` factors `A`, `B`. The cache stores `K·A` and the
//!   query is multiplied by `B` at runtime, so the scores become
//!   `(Q B)(K A)ᵀ = Q (A Bᵀ)ᵀ Kᵀ` (KQ-SVD and its value/output analogue).
//!
//! Both are wrapped by [`LowRankMap`], where a projection is the `A = B`
//! special case.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{mismatch, Error, Result};
use crate::linalg::{
    default_pinv_tol, pinv_from_svd, product_fro_sq, product_svd, singular_values, thin_svd,
    Matrix,
};

/// Compression method compared by the evaluation pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ksvd,
    Eigen,
    Kqsvd,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Ksvd, Method::Eigen, Method::Kqsvd];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Ksvd => "ksvd",
            Method::Eigen => "eigen",
            Method::Kqsvd => "kqsvd",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ksvd" | "k-svd" => Ok(Method::Ksvd),
            "eigen" => Ok(Method::Eigen),
            "kqsvd" | "kq-svd" => Ok(Method::Kqsvd),
            other => Err(Error::InvalidConfig(format!(
                "unknown method '{other}' (expected ksvd, eigen or kqsvd)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectionMethod {
    Ksvd,
    Eigen,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FactorMethod {
    Kqsvd,
    Vosvd,
}

/// Orthonormal rank-`R` basis; the projector is `basis · basisᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub basis: Matrix,
    pub method: ProjectionMethod,
    pub rank: usize,
    /// `σ_R == σ_{R+1}` in the spectrum that selected the basis.
    pub tie_at_cut: bool,
}

impl Projection {
    pub fn projector(&self) -> Matrix {
        self.basis.mul_t(&self.basis)
    }
}

/// Factors `A`, `B` (`d×R`) with `S = A Bᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorPair {
    pub a: Matrix,
    pub b: Matrix,
    pub method: FactorMethod,
    pub rank: usize,
    pub tie_at_cut: bool,
}

impl FactorPair {
    pub fn operator(&self) -> Matrix {
        self.a.mul_t(&self.b)
    }
}

/// Result of the stacked GQA solve: one shared `A`, and one `B` per query
/// head of the group (all equal to the shared `B`).
#[derive(Clone, Debug, PartialEq)]
pub struct GqaFactors {
    pub pair: FactorPair,
    pub head_b: Vec<Matrix>,
    /// Query heads whose cache is numerically rank deficient. The stacked
    /// solution is still optimal for the stacked objective.
    pub rank_deficient_queries: Vec<usize>,
}

/// Per-cache operator used by plans: either untouched, a projector, or a
/// factor pair.
#[derive(Clone, Debug, PartialEq)]
pub enum LowRankMap {
    Identity { dim: usize },
    Projection(Projection),
    Factors(FactorPair),
}

impl LowRankMap {
    pub fn dim(&self) -> usize {
        match self {
            LowRankMap::Identity { dim } => *dim,
            LowRankMap::Projection(p) => p.basis.rows(),
            LowRankMap::Factors(f) => f.a.rows(),
        }
    }

    pub fn rank(&self) -> usize {
        match self {
            LowRankMap::Identity { dim } => *dim,
            LowRankMap::Projection(p) => p.rank,
            LowRankMap::Factors(f) => f.rank,
        }
    }

    pub fn tie_at_cut(&self) -> bool {
        match self {
            LowRankMap::Identity { .. } => false,
            LowRankMap::Projection(p) => p.tie_at_cut,
            LowRankMap::Factors(f) => f.tie_at_cut,
        }
    }

    /// Factor applied to the cached matrix (`A`, or the basis).
    pub fn down(&self) -> Option<&Matrix> {
        match self {
            LowRankMap::Identity { .. } => None,
            LowRankMap::Projection(p) => Some(&p.basis),
            LowRankMap::Factors(f) => Some(&f.a),
        }
    }

    /// Factor applied to the partner matrix at runtime (`B`, or the basis).
    pub fn up(&self) -> Option<&Matrix> {
        match self {
            LowRankMap::Identity { .. } => None,
            LowRankMap::Projection(p) => Some(&p.basis),
            LowRankMap::Factors(f) => Some(&f.b),
        }
    }

    /// `cache · A`: what is stored instead of the cache.
    pub fn compress(&self, cache: &Matrix) -> Matrix {
        match self.down() {
            Some(a) => cache.mul(a),
            None => cache.clone(),
        }
    }

    /// `partner · B`.
    pub fn lift(&self, partner: &Matrix) -> Matrix {
        match self.up() {
            Some(b) => partner.mul(b),
            None => partner.clone(),
        }
    }

    /// `Bᵀ · W`, used to fold the value factor into an output projection slice.
    pub fn fold_output(&self, wo: &Matrix) -> Matrix {
        match self.up() {
            Some(b) => b.t_mul(wo),
            None => wo.clone(),
        }
    }

    /// The `d×d` operator `S = A Bᵀ` (identity when uncompressed).
    pub fn operator(&self) -> Matrix {
        match (self.down(), self.up()) {
            (Some(a), Some(b)) => a.mul_t(b),
            _ => Matrix::identity(self.dim()),
        }
    }

    /// Reconstructed cache `cache · S`.
    pub fn reconstruct(&self, cache: &Matrix) -> Matrix {
        match (self.down(), self.up()) {
            (Some(a), Some(b)) => cache.mul(a).mul_t(b),
            _ => cache.clone(),
        }
    }

    /// Partner matrix as seen through the operator, `partner · Sᵀ`.
    ///
    /// For projections this is the projected query `Q V̂V̂ᵀ`. For factor pairs
    /// `S` is an oblique projector (`S² = S`), so `Q Sᵀ (K S)ᵀ = Q Sᵀ Kᵀ`
    /// reproduces the compressed scores exactly.
    pub fn reconstruct_partner(&self, partner: &Matrix) -> Matrix {
        match (self.down(), self.up()) {
            (Some(a), Some(b)) => partner.mul(b).mul_t(a),
            _ => partner.clone(),
        }
    }
}

fn check_rank(rank: usize, dim: usize) -> Result<()> {
    if rank == 0 || rank > dim {
        return Err(Error::InvalidRank { rank, max: dim });
    }
    Ok(())
}

/// Relative tie threshold between `σ_R` and `σ_{R+1}`.
const TIE_TOL: f64 = 1e-10;

fn tie_at(sigma: &[f64], rank: usize) -> bool {
    match (sigma.get(rank.wrapping_sub(1)), sigma.get(rank)) {
        (Some(&a), Some(&b)) => a - b <= TIE_TOL * sigma[0].max(f64::MIN_POSITIVE),
        _ => false,
    }
}

/// Top-`rank` right singular vectors of `m`, padding with zero rows so a full
/// set of `cols` vectors exists even when `m` is wide.
fn right_basis(m: &Matrix, rank: usize) -> Result<(Matrix, bool)> {
    let f = if m.rows() < m.cols() {
        thin_svd(&Matrix::vstack(&[m, &Matrix::zeros(m.cols() - m.rows(), m.cols())])?)?
    } else {
        thin_svd(m)?
    };
    Ok((f.leading_v(rank), tie_at(&f.sigma, rank)))
}

/// K-SVD: the top-`rank` right singular vectors of the key cache.
pub fn ksvd(k: &Matrix, rank: usize) -> Result<Projection> {
    check_rank(rank, k.cols())?;
    let (basis, tie_at_cut) = right_basis(k, rank)?;
    Ok(Projection {
        basis,
        method: ProjectionMethod::Ksvd,
        rank,
        tie_at_cut,
    })
}

/// Eigen: the top-`rank` right singular vectors of `[K; Q]`.
pub fn eigen(k: &Matrix, q: &Matrix, rank: usize) -> Result<Projection> {
    if k.shape() != q.shape() {
        return Err(mismatch(
            "eigen",
            format!("K is {:?}, Q is {:?}", k.shape(), q.shape()),
        ));
    }
    eigen_group(k, &[q], rank)
}

/// Eigen for a GQA group: the stack `[K; Q₁; …; Q_m]`.
pub fn eigen_group(k: &Matrix, queries: &[&Matrix], rank: usize) -> Result<Projection> {
    if queries.is_empty() {
        return Err(Error::EmptyGroup);
    }
    check_rank(rank, k.cols())?;
    let mut blocks = vec![k];
    blocks.extend_from_slice(queries);
    let stacked = Matrix::vstack(&blocks)?;
    let (basis, tie_at_cut) = right_basis(&stacked, rank)?;
    Ok(Projection {
        basis,
        method: ProjectionMethod::Eigen,
        rank,
        tie_at_cut,
    })
}

/// KQ-SVD: `A = K⁺ Û`, `B = Kᵀ Û` with `Û` the top-`rank` left singular
/// vectors of `K Qᵀ`. Then `K A Bᵀ Qᵀ` is the best rank-`rank`
/// approximation of `K Qᵀ` in Frobenius norm.
pub fn kqsvd(k: &Matrix, q: &Matrix, rank: usize) -> Result<FactorPair> {
    if k.cols() != q.cols() {
        return Err(mismatch(
            "kqsvd",
            format!("K has {} columns, Q has {}", k.cols(), q.cols()),
        ));
    }
    check_rank(rank, k.cols())?;
    let prod = product_svd(k, q)?;
    let kept = rank.min(prod.rank());
    let u_hat = prod.leading_u(kept);

    let kf = thin_svd(k)?;
    let k_pinv = pinv_from_svd(&kf, default_pinv_tol(k.rows(), k.cols()));
    let mut a = k_pinv.mul(&u_hat);
    let mut b = k.t_mul(&u_hat);
    if kept < rank {
        a = a.pad_columns(rank);
        b = b.pad_columns(rank);
    }
    Ok(FactorPair {
        a,
        b,
        method: FactorMethod::Kqsvd,
        rank,
        tie_at_cut: tie_at(&prod.sigma, rank),
    })
}

/// Value/output analogue of [`kqsvd`]: minimizes `‖V A Bᵀ W − V W‖_F` for
/// `V: T×d`, `W: d×D`.
pub fn vo_svd(v: &Matrix, wo: &Matrix, rank: usize) -> Result<FactorPair> {
    if v.cols() != wo.rows() {
        return Err(mismatch(
            "vo_svd",
            format!("V has {} columns, W^O has {} rows", v.cols(), wo.rows()),
        ));
    }
    let mut pair = kqsvd(v, &wo.transpose(), rank)?;
    pair.method = FactorMethod::Vosvd;
    Ok(pair)
}

/// KQ-SVD for a group of query heads sharing one key cache, solved on the
/// vertically stacked queries.
pub fn gqa_kqsvd(k: &Matrix, queries: &[&Matrix], rank: usize) -> Result<GqaFactors> {
    if queries.is_empty() {
        return Err(Error::EmptyGroup);
    }
    if let Some(q) = queries.iter().find(|q| q.shape() != k.shape()) {
        return Err(mismatch(
            "gqa_kqsvd",
            format!("query is {:?}, key is {:?}", q.shape(), k.shape()),
        ));
    }
    let stacked = Matrix::vstack(queries)?;
    let pair = kqsvd(k, &stacked, rank)?;

    let mut rank_deficient_queries = Vec::new();
    for (i, q) in queries.iter().enumerate() {
        let sv = singular_values(q)?;
        let cutoff = default_pinv_tol(q.rows(), q.cols()) * sv[0];
        let numerical_rank = sv.iter().filter(|&&s| s > cutoff).count();
        if numerical_rank < q.cols() {
            rank_deficient_queries.push(i);
        }
    }
    Ok(GqaFactors {
        head_b: vec![pair.b.clone(); queries.len()],
        pair,
        rank_deficient_queries,
    })
}

/// Smallest `R` with `Σ_{j≤R} σ_j² / Σ_j σ_j² ≥ 1 − ε`.
pub fn select_rank(spectrum: &[f64], epsilon: f64) -> Result<usize> {
    if spectrum.is_empty() {
        return Err(Error::InvalidSpectrum("empty"));
    }
    if spectrum.iter().any(|s| !s.is_finite() || *s < 0.0) {
        return Err(Error::InvalidSpectrum("values must be finite and non-negative"));
    }
    if spectrum.windows(2).any(|w| w[0] < w[1]) {
        return Err(Error::InvalidSpectrum("values must be sorted in descending order"));
    }
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::InvalidEpsilon(epsilon));
    }
    let energies: Vec<f64> = spectrum.iter().map(|s| s * s).collect();
    let total: f64 = energies.iter().sum();
    let target = (1.0 - epsilon) * total;
    let mut cumulative = 0.0;
    for (i, e) in energies.iter().enumerate() {
        cumulative += e;
        if cumulative >= target {
            return Ok(i + 1);
        }
    }
    Ok(spectrum.len())
}

/// `sqrt(mean_h σ_j(M_h)²)`: the head-averaged singular spectrum of a layer.
pub fn head_averaged_spectrum(mats: &[&Matrix]) -> Result<Vec<f64>> {
    let first = mats.first().ok_or(Error::EmptyGroup)?;
    let d = first.cols();
    let mut acc = vec![0.0; d];
    for m in mats {
        if m.cols() != d {
            return Err(mismatch(
                "head_averaged_spectrum",
                format!("head with {} columns, expected {d}", m.cols()),
            ));
        }
        for (a, s) in acc.iter_mut().zip(singular_values(m)?) {
            *a += s * s;
        }
    }
    let n = mats.len() as f64;
    Ok(acc.into_iter().map(|e| libm::sqrt(e / n)).collect())
}

/// Per-layer `(rank_k, rank_v)` from head-averaged key and value spectra.
pub fn select_layer_ranks(
    keys: &[&Matrix],
    values: &[&Matrix],
    epsilon: f64,
) -> Result<(usize, usize)> {
    let rk = select_rank(&head_averaged_spectrum(keys)?, epsilon)?;
    let rv = select_rank(&head_averaged_spectrum(values)?, epsilon)?;
    Ok((rk, rv))
}

/// `‖K S Qᵀ − K Qᵀ‖²_F` for a `d×d` operator `S`, without forming `K Qᵀ`.
pub fn score_error(k: &Matrix, q: &Matrix, operator: &Matrix) -> f64 {
    let residual = k.mul(&operator.sub(&Matrix::identity(k.cols())));
    product_fro_sq(&residual, q)
}

/// Exact K-SVD optimality gap for the score objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GapReport {
    /// KQ-SVD error `‖K A Bᵀ Qᵀ − K Qᵀ‖²_F`.
    pub opt: f64,
    /// K-SVD error `‖K V̂V̂ᵀ Qᵀ − K Qᵀ‖²_F`.
    pub err_ksvd: f64,
    /// `err_ksvd − opt`.
    pub gap: f64,
    /// `Σ_{i≤R} σ_i(K Qᵀ)²`.
    pub top_r_energy: f64,
    /// `‖K V̂V̂ᵀ Qᵀ‖²_F`.
    pub projected_energy: f64,
    /// `‖K Qᵀ‖²_F`, the natural scale for tolerances.
    pub total_energy: f64,
}

impl GapReport {
    /// `|gap − (top_r_energy − projected_energy)|`.
    pub fn identity_residual(&self) -> f64 {
        (self.gap - (self.top_r_energy - self.projected_energy)).abs()
    }
}

/// Evaluates both sides of the gap identity
/// `err_ksvd − opt = Σ_{i≤R} σ_i(KQᵀ)² − ‖K V̂V̂ᵀ Qᵀ‖²_F`.
///
/// The left side comes from the two methods' actual errors; the right side
/// from the spectrum of `K Qᵀ` and the K-SVD projector.
pub fn error_gap_ksvd(k: &Matrix, q: &Matrix, rank: usize) -> Result<GapReport> {
    let kq = kqsvd(k, q, rank)?;
    let ks = ksvd(k, rank)?;
    let prod = product_svd(k, q)?;

    let opt = score_error(k, q, &kq.operator());
    let projector = ks.projector();
    let err_ksvd = score_error(k, q, &projector);
    let projected_energy = product_fro_sq(&k.mul(&projector), q);
    Ok(GapReport {
        opt,
        err_ksvd,
        gap: err_ksvd - opt,
        top_r_energy: prod.head_energy(rank),
        projected_energy,
        total_energy: prod.head_energy(prod.rank()),
    })
}

/// Caches for one KV head (or GQA group) used to build a plan.
#[derive(Clone, Debug)]
pub struct GroupCaches<'a> {
    pub key: &'a Matrix,
    pub value: &'a Matrix,
    /// Query caches of the heads attending to this key/value head.
    pub queries: Vec<&'a Matrix>,
    /// Output-projection slices `W_i^O` (`d×D`) of those query heads.
    pub wo_slices: Vec<&'a Matrix>,
}

/// Projections for one (layer, KV head): what gets stored instead of the
/// cache.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressionPlan {
    pub layer: usize,
    pub group: usize,
    pub method: Method,
    pub key: LowRankMap,
    pub value: LowRankMap,
    pub epsilon: Option<f64>,
    pub rank_k: usize,
    pub rank_v: usize,
    /// Tie `σ_R = σ_{R+1}` at the cut of the key or value spectrum.
    pub degenerate: bool,
    /// Some query head of the group had a rank-deficient cache.
    pub rank_deficient_queries: bool,
}

/// Builds the key and value plan of `method` for one group.
///
/// * K-SVD: `ksvd(K)` for keys, `ksvd(V)` for values.
/// * Eigen: SVD of `[K; Q₁; …]` for keys, `ksvd(V)` for values.
/// * KQ-SVD: stacked [`gqa_kqsvd`] for keys, [`vo_svd`] against the
///   horizontally concatenated output slices for values.
pub fn build_plan(
    method: Method,
    caches: &GroupCaches<'_>,
    layer: usize,
    group: usize,
    rank_k: usize,
    rank_v: usize,
    epsilon: Option<f64>,
) -> Result<CompressionPlan> {
    if caches.queries.is_empty() || caches.queries.len() != caches.wo_slices.len() {
        return Err(Error::EmptyGroup);
    }
    let mut rank_deficient_queries = false;
    let (key, value) = match method {
        Method::Ksvd => (
            LowRankMap::Projection(ksvd(caches.key, rank_k)?),
            LowRankMap::Projection(ksvd(caches.value, rank_v)?),
        ),
        Method::Eigen => (
            LowRankMap::Projection(eigen_group(caches.key, &caches.queries, rank_k)?),
            LowRankMap::Projection(ksvd(caches.value, rank_v)?),
        ),
        Method::Kqsvd => {
            let g = gqa_kqsvd(caches.key, &caches.queries, rank_k)?;
            rank_deficient_queries = !g.rank_deficient_queries.is_empty();
            let wo = Matrix::hstack(&caches.wo_slices)?;
            (
                LowRankMap::Factors(g.pair),
                LowRankMap::Factors(vo_svd(caches.value, &wo, rank_v)?),
            )
        }
    };
    Ok(CompressionPlan {
        layer,
        group,
        method,
        degenerate: key.tie_at_cut() || value.tie_at_cut(),
        key,
        value,
        epsilon,
        rank_k,
        rank_v,
        rank_deficient_queries,
    })
}

/// Human-readable description of how the query error is measured for each
/// plan kind; recorded alongside reports.
pub const Q_ERROR_DEFINITION: &str =
    "Q~ = Q·B·Aᵀ (Q·V̂V̂ᵀ for projections); A·Bᵀ is an oblique projector for KQ-SVD";
