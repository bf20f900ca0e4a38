//! Exact and compressed multi-head attention over cached `K`, `Q`, `V`.
//!
//! A [`ModelSlice`] is one layer of one sequence: per-KV-head key and value
//! caches, per-query-head query caches, the matching row blocks `W_i^O` of the
//! output projection, and the grouping of query heads onto KV heads. Plain
//! multi-head attention is the case where every group has one member.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::compress::{
    score_error, CompressionPlan, GroupCaches, Method, Q_ERROR_DEFINITION,
};
use crate::error::{mismatch, Error, Result};
use crate::linalg::{product_fro_sq, product_svd, spectral_norm, Matrix};

/// Assignment of query heads to shared key/value heads.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupMap {
    groups: Vec<Vec<usize>>,
    kv_of: Vec<usize>,
}

impl GroupMap {
    /// Query head `i` uses KV head `i / (h / g)`.
    pub fn contiguous(q_heads: usize, kv_heads: usize) -> Result<Self> {
        if q_heads == 0 || kv_heads == 0 || q_heads % kv_heads != 0 {
            return Err(Error::InvalidGroups(format!(
                "{kv_heads} KV heads cannot evenly serve {q_heads} query heads"
            )));
        }
        let m = q_heads / kv_heads;
        Self::from_groups(
            (0..kv_heads)
                .map(|g| (g * m..(g + 1) * m).collect())
                .collect(),
        )
    }

    /// Validates that every query head `0..h` appears in exactly one group
    /// and that no group is empty.
    pub fn from_groups(groups: Vec<Vec<usize>>) -> Result<Self> {
        if groups.is_empty() {
            return Err(Error::InvalidGroups("no groups".into()));
        }
        let q_heads: usize = groups.iter().map(Vec::len).sum();
        let mut kv_of = vec![usize::MAX; q_heads];
        for (g, members) in groups.iter().enumerate() {
            if members.is_empty() {
                return Err(Error::InvalidGroups(format!("group {g} is empty")));
            }
            for &q in members {
                if q >= q_heads {
                    return Err(Error::InvalidGroups(format!(
                        "query head {q} out of range for {q_heads} heads"
                    )));
                }
                if kv_of[q] != usize::MAX {
                    return Err(Error::InvalidGroups(format!(
                        "query head {q} appears in more than one group"
                    )));
                }
                kv_of[q] = g;
            }
        }
        Ok(Self { groups, kv_of })
    }

    pub fn q_heads(&self) -> usize {
        self.kv_of.len()
    }

    pub fn kv_heads(&self) -> usize {
        self.groups.len()
    }

    pub fn kv_head(&self, q: usize) -> usize {
        self.kv_of[q]
    }

    pub fn members(&self, kv: usize) -> &[usize] {
        &self.groups[kv]
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }
}

/// Caches seen by one query head.
#[derive(Clone, Copy, Debug)]
pub struct HeadCaches<'a> {
    pub head: usize,
    pub k: &'a Matrix,
    pub q: &'a Matrix,
    pub v: &'a Matrix,
}

/// One attention layer evaluated on one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSlice {
    keys: Vec<Matrix>,
    values: Vec<Matrix>,
    queries: Vec<Matrix>,
    wo_slices: Vec<Matrix>,
    groups: GroupMap,
}

impl ModelSlice {
    pub fn new(
        keys: Vec<Matrix>,
        values: Vec<Matrix>,
        queries: Vec<Matrix>,
        wo_slices: Vec<Matrix>,
        groups: GroupMap,
    ) -> Result<Self> {
        let op = "ModelSlice::new";
        if keys.len() != groups.kv_heads() || values.len() != groups.kv_heads() {
            return Err(mismatch(
                op,
                format!(
                    "{} key and {} value heads for {} groups",
                    keys.len(),
                    values.len(),
                    groups.kv_heads()
                ),
            ));
        }
        if queries.len() != groups.q_heads() || wo_slices.len() != groups.q_heads() {
            return Err(mismatch(
                op,
                format!(
                    "{} query heads and {} output slices for {} grouped heads",
                    queries.len(),
                    wo_slices.len(),
                    groups.q_heads()
                ),
            ));
        }
        let shape = keys[0].shape();
        let all_caches = keys.iter().chain(&values).chain(&queries);
        if let Some(m) = all_caches.into_iter().find(|m| m.shape() != shape) {
            return Err(mismatch(
                op,
                format!("cache of shape {:?}, expected {shape:?}", m.shape()),
            ));
        }
        let out_shape = (shape.1, wo_slices[0].cols());
        if let Some(w) = wo_slices.iter().find(|w| w.shape() != out_shape) {
            return Err(mismatch(
                op,
                format!("output slice {:?}, expected {out_shape:?}", w.shape()),
            ));
        }
        Ok(Self {
            keys,
            values,
            queries,
            wo_slices,
            groups,
        })
    }

    /// Plain multi-head attention: one `(K, Q, V)` triple per head and the full
    /// `D×D` output projection, split into `d`-row blocks.
    pub fn from_heads(heads: Vec<(Matrix, Matrix, Matrix)>, wo: &Matrix) -> Result<Self> {
        let h = heads.len();
        if h == 0 {
            return Err(Error::EmptyGroup);
        }
        let d = heads[0].0.cols();
        if wo.rows() != h * d {
            return Err(mismatch(
                "ModelSlice::from_heads",
                format!("W^O has {} rows, expected {}", wo.rows(), h * d),
            ));
        }
        let wo_slices = (0..h).map(|i| wo.row_block(i * d..(i + 1) * d)).collect();
        let mut keys = Vec::with_capacity(h);
        let mut queries = Vec::with_capacity(h);
        let mut values = Vec::with_capacity(h);
        for (k, q, v) in heads {
            keys.push(k);
            queries.push(q);
            values.push(v);
        }
        Self::new(keys, values, queries, wo_slices, GroupMap::contiguous(h, h)?)
    }

    pub fn tokens(&self) -> usize {
        self.keys[0].rows()
    }

    pub fn head_dim(&self) -> usize {
        self.keys[0].cols()
    }

    pub fn model_dim(&self) -> usize {
        self.wo_slices[0].cols()
    }

    /// `1/√d`.
    pub fn scale(&self) -> f64 {
        1.0 / libm::sqrt(self.head_dim() as f64)
    }

    pub fn groups(&self) -> &GroupMap {
        &self.groups
    }

    pub fn keys(&self) -> &[Matrix] {
        &self.keys
    }

    pub fn values(&self) -> &[Matrix] {
        &self.values
    }

    pub fn queries(&self) -> &[Matrix] {
        &self.queries
    }

    pub fn wo_slices(&self) -> &[Matrix] {
        &self.wo_slices
    }

    pub fn head(&self, q: usize) -> HeadCaches<'_> {
        let g = self.groups.kv_head(q);
        HeadCaches {
            head: q,
            k: &self.keys[g],
            q: &self.queries[q],
            v: &self.values[g],
        }
    }

    pub fn group_caches(&self, kv: usize) -> GroupCaches<'_> {
        let members = self.groups.members(kv);
        GroupCaches {
            key: &self.keys[kv],
            value: &self.values[kv],
            queries: members.iter().map(|&q| &self.queries[q]).collect(),
            wo_slices: members.iter().map(|&q| &self.wo_slices[q]).collect(),
        }
    }

    /// Same slice with every query head given its own copy of its group's
    /// key and value caches.
    pub fn expand_groups(&self) -> ModelSlice {
        let h = self.groups.q_heads();
        let keys = (0..h).map(|q| self.head(q).k.clone()).collect();
        let values = (0..h).map(|q| self.head(q).v.clone()).collect();
        ModelSlice {
            keys,
            values,
            queries: self.queries.clone(),
            wo_slices: self.wo_slices.clone(),
            groups: GroupMap::contiguous(h, h).expect("h >= 1"),
        }
    }
}

/// Row-wise softmax with row-max stabilization. With `causal`, entry `(i, j)`
/// for `j > i` is masked to exactly zero.
pub fn softmax_rows(m: &Matrix, causal: bool) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for i in 0..m.rows() {
        let visible = if causal { (i + 1).min(m.cols()) } else { m.cols() };
        let row = &m.row(i)[..visible];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (j, &x) in row.iter().enumerate() {
            let e = libm::exp(x - max);
            out[(i, j)] = e;
            sum += e;
        }
        for j in 0..visible {
            out[(i, j)] /= sum;
        }
    }
    out
}

/// `Σ_i Softmax(Q_i K_iᵀ/√d) V_i W_i^O`.
pub fn mha_forward(slice: &ModelSlice, causal: bool) -> Matrix {
    let scale = slice.scale();
    let mut out = Matrix::zeros(slice.tokens(), slice.model_dim());
    for q in 0..slice.groups.q_heads() {
        let h = slice.head(q);
        let weights = softmax_rows(&h.q.mul_t(h.k).scale(scale), causal);
        let head_out = weights.mul(h.v).mul(&slice.wo_slices[q]);
        out = out.add(&head_out);
    }
    out
}

fn check_plans(slice: &ModelSlice, plans: &[CompressionPlan]) -> Result<()> {
    if plans.len() != slice.groups.kv_heads() {
        return Err(Error::PlanMismatch(format!(
            "{} plans for {} KV heads",
            plans.len(),
            slice.groups.kv_heads()
        )));
    }
    let d = slice.head_dim();
    for (g, p) in plans.iter().enumerate() {
        if p.key.dim() != d || p.value.dim() != d {
            return Err(Error::PlanMismatch(format!(
                "plan for KV head {g} acts on dimension {}/{}, heads have d = {d}",
                p.key.dim(),
                p.value.dim()
            )));
        }
        if p.key.rank() > d || p.value.rank() > d {
            return Err(Error::PlanMismatch(format!(
                "plan for KV head {g} has rank above d = {d}"
            )));
        }
    }
    Ok(())
}

/// Attention evaluated from compressed caches.
///
/// Scores are `(Q·B)(K·A)ᵀ/√d` (a projection uses its basis for both), and the
/// head output is `Softmax(·)·(V·A_v)·(B_vᵀ·W_i^O)`.
pub fn compressed_mha_forward(
    slice: &ModelSlice,
    plans: &[CompressionPlan],
    causal: bool,
) -> Result<Matrix> {
    check_plans(slice, plans)?;
    let scale = slice.scale();
    let compressed: Vec<(Matrix, Matrix)> = plans
        .iter()
        .enumerate()
        .map(|(g, p)| (p.key.compress(&slice.keys[g]), p.value.compress(&slice.values[g])))
        .collect();

    let mut out = Matrix::zeros(slice.tokens(), slice.model_dim());
    for q in 0..slice.groups.q_heads() {
        let g = slice.groups.kv_head(q);
        let plan = &plans[g];
        let (k_small, v_small) = &compressed[g];
        let q_small = plan.key.lift(&slice.queries[q]);
        let weights = softmax_rows(&q_small.mul_t(k_small).scale(scale), causal);
        let wo_small = plan.value.fold_output(&slice.wo_slices[q]);
        out = out.add(&weights.mul(v_small).mul(&wo_small));
    }
    Ok(out)
}

/// Right-hand side of the perturbation bound
///
/// `Σ_i ‖V_i W_i‖₂/√d · ‖Q_i K_iᵀ − Q_i K̃_iᵀ‖₂ + ‖V_i W_i − Ṽ_i W_i‖₂`
///
/// with one `(K̃, Ṽ)` per KV head. Spectral norms of the low-rank products are
/// taken from [`product_svd`], so no `T×T` matrix is formed.
pub fn perturbation_bound(slice: &ModelSlice, approx: &[(Matrix, Matrix)]) -> Result<f64> {
    if approx.len() != slice.groups.kv_heads() {
        return Err(mismatch(
            "perturbation_bound",
            format!(
                "{} approximations for {} KV heads",
                approx.len(),
                slice.groups.kv_heads()
            ),
        ));
    }
    for (g, (kt, vt)) in approx.iter().enumerate() {
        if kt.shape() != slice.keys[g].shape() || vt.shape() != slice.values[g].shape() {
            return Err(mismatch(
                "perturbation_bound",
                format!("approximation for KV head {g} has the wrong shape"),
            ));
        }
    }
    let scale = slice.scale();
    let mut bound = 0.0;
    for q in 0..slice.groups.q_heads() {
        let g = slice.groups.kv_head(q);
        let h = slice.head(q);
        let (kt, vt) = &approx[g];
        let wt = slice.wo_slices[q].transpose();
        let amplification = product_svd(h.v, &wt)?.sigma[0];
        let score_err = product_svd(h.q, &h.k.sub(kt))?.sigma[0];
        let value_err = product_svd(&h.v.sub(vt), &wt)?.sigma[0];
        bound += amplification * scale * score_err + value_err;
    }
    Ok(bound)
}

/// Per-cache approximations `(K·S_k, V·S_v)` implied by a set of plans.
pub fn plan_approximations(slice: &ModelSlice, plans: &[CompressionPlan]) -> Result<Vec<(Matrix, Matrix)>> {
    check_plans(slice, plans)?;
    Ok(plans
        .iter()
        .enumerate()
        .map(|(g, p)| (p.key.reconstruct(&slice.keys[g]), p.value.reconstruct(&slice.values[g])))
        .collect())
}

/// Errors of one method on one layer.
///
/// The `err_*` fields are squared relative Frobenius errors
/// `‖M − M̃‖²_F / ‖M‖²_F`; `bound` and `err_out_spectral` are absolute
/// spectral-norm quantities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MethodErrors {
    pub method: Method,
    pub err_k: f64,
    pub err_q: f64,
    pub err_v: f64,
    pub err_kqt: f64,
    pub err_out: f64,
    pub bound: f64,
    pub err_out_spectral: f64,
}

impl MethodErrors {
    pub fn fields(&self) -> [f64; 7] {
        [
            self.err_k,
            self.err_q,
            self.err_v,
            self.err_kqt,
            self.err_out,
            self.bound,
            self.err_out_spectral,
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ErrorReport {
    pub rows: Vec<MethodErrors>,
    pub q_error_definition: &'static str,
}

impl ErrorReport {
    pub fn get(&self, method: Method) -> Option<&MethodErrors> {
        self.rows.iter().find(|r| r.method == method)
    }
}

fn relative(reference_sq: f64, diff_sq: f64) -> Result<f64> {
    if reference_sq == 0.0 {
        return if diff_sq == 0.0 {
            Ok(0.0)
        } else {
            Err(Error::ZeroReference)
        };
    }
    Ok(diff_sq / reference_sq)
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    sum / n as f64
}

/// Errors of every method across the attention pipeline of one layer.
///
/// Key, value and score errors are averaged over heads. The score error
/// `‖K S Qᵀ − K Qᵀ‖²/‖K Qᵀ‖²` is taken before the softmax and without a mask;
/// the output error uses `causal`. All methods must share the same per-group
/// ranks.
pub fn error_report(
    slice: &ModelSlice,
    plans: &[(Method, &[CompressionPlan])],
    causal: bool,
) -> Result<ErrorReport> {
    if let Some((first_method, first)) = plans.first() {
        for (method, other) in &plans[1..] {
            let same = first.len() == other.len()
                && first
                    .iter()
                    .zip(other.iter())
                    .all(|(a, b)| a.rank_k == b.rank_k && a.rank_v == b.rank_v);
            if !same {
                return Err(Error::InconsistentRanks(format!(
                    "{first_method} and {method} plans use different ranks"
                )));
            }
        }
    }

    let exact = mha_forward(slice, causal);
    let exact_sq = exact.fro_norm_sq();
    let mut rows = Vec::with_capacity(plans.len());
    for (method, method_plans) in plans {
        let approx = plan_approximations(slice, method_plans)?;
        let compressed = compressed_mha_forward(slice, method_plans, causal)?;

        let mut err_k = Vec::new();
        let mut err_v = Vec::new();
        for (g, (kt, vt)) in approx.iter().enumerate() {
            let k = &slice.keys[g];
            let v = &slice.values[g];
            err_k.push(relative(k.fro_norm_sq(), k.sub(kt).fro_norm_sq())?);
            err_v.push(relative(v.fro_norm_sq(), v.sub(vt).fro_norm_sq())?);
        }
        let mut err_q = Vec::new();
        let mut err_kqt = Vec::new();
        for q in 0..slice.groups.q_heads() {
            let g = slice.groups.kv_head(q);
            let plan = &method_plans[g];
            let h = slice.head(q);
            let qt = plan.key.reconstruct_partner(h.q);
            err_q.push(relative(h.q.fro_norm_sq(), h.q.sub(&qt).fro_norm_sq())?);
            let scores_sq = product_fro_sq(h.k, h.q);
            err_kqt.push(relative(
                scores_sq,
                score_error(h.k, h.q, &plan.key.operator()),
            )?);
        }
        let diff = compressed.sub(&exact);
        rows.push(MethodErrors {
            method: *method,
            err_k: mean(err_k.into_iter()),
            err_q: mean(err_q.into_iter()),
            err_v: mean(err_v.into_iter()),
            err_kqt: mean(err_kqt.into_iter()),
            err_out: relative(exact_sq, diff.fro_norm_sq())?,
            bound: perturbation_bound(slice, &approx)?,
            err_out_spectral: spectral_norm(&diff)?,
        });
    }
    Ok(ErrorReport {
        rows,
        q_error_definition: Q_ERROR_DEFINITION,
    })
}

/// Description of the slice for diagnostics.
pub fn describe(slice: &ModelSlice) -> String {
    format!(
        "T={} d={} D={} h={} g={}",
        slice.tokens(),
        slice.head_dim(),
        slice.model_dim(),
        slice.groups.q_heads(),
        slice.groups.kv_heads()
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&Matrix::zeros(1, 2), false);
        assert_eq!(s.as_slice(), &[0.5, 0.5]);

        let s = softmax_rows(&Matrix::zeros(2, 2), true);
        assert_eq!(s.as_slice(), &[1.0, 0.0, 0.5, 0.5]);

        let s = softmax_rows(&Matrix::from_row_slice(1, 2, &[1000.0, 1000.0]), false);
        assert_eq!(s.as_slice(), &[0.5, 0.5]);
    }

    #[test]
    fn group_map_validation() {
        let g = GroupMap::contiguous(8, 2).unwrap();
        assert_eq!(g.members(1), &[4, 5, 6, 7]);
        assert_eq!(g.kv_head(3), 0);
        assert!(GroupMap::contiguous(8, 3).is_err());
        assert!(GroupMap::from_groups(vec![vec![0, 1], vec![1]]).is_err());
        assert!(GroupMap::from_groups(vec![vec![0, 5]]).is_err());
        assert!(GroupMap::from_groups(vec![vec![0], vec![]]).is_err());
        assert!(GroupMap::from_groups(vec![vec![1], vec![0]]).is_ok());
    }

    #[test]
    fn identity_heads_produce_convex_combinations() {
        let i2 = Matrix::identity(2);
        let slice = ModelSlice::from_heads(vec![(i2.clone(), i2.clone(), i2.clone())], &i2).unwrap();
        let out = mha_forward(&slice, false);
        for r in 0..2 {
            let row = out.row(r);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-15);
            assert!(row.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
        let expected = softmax_rows(&i2.scale(slice.scale()), false);
        assert!(out.sub(&expected).max_abs() < 1e-15);
    }

    #[test]
    fn zero_values_give_zero_output() {
        let k = Matrix::from_fn(3, 2, |r, c| (r + c) as f64);
        let slice = ModelSlice::from_heads(
            vec![(k.clone(), k.clone(), Matrix::zeros(3, 2))],
            &Matrix::identity(2),
        )
        .unwrap();
        assert_eq!(mha_forward(&slice, true), Matrix::zeros(3, 2));
    }

    #[test]
    fn slice_shape_errors() {
        let k = Matrix::zeros(3, 2);
        let err = ModelSlice::from_heads(vec![(k.clone(), k.clone(), k.clone())], &Matrix::identity(3));
        assert!(matches!(err, Err(Error::DimensionMismatch { .. })));
        let err = ModelSlice::from_heads(
            vec![(k.clone(), Matrix::zeros(4, 2), k.clone())],
            &Matrix::identity(2),
        );
        assert!(matches!(err, Err(Error::DimensionMismatch { .. })));
    }
}
