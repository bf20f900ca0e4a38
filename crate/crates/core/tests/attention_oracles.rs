mod common;

use common::*;
use kqsvd_core::attention::{
    compressed_mha_forward, error_report, mha_forward, perturbation_bound, plan_approximations,
    GroupMap, ModelSlice,
};
use kqsvd_core::compress::{
    build_plan, error_gap_ksvd, kqsvd, ksvd, CompressionPlan, LowRankMap, Method,
};
use kqsvd_core::linalg::spectral_norm;
use kqsvd_core::{Error, Matrix};

fn random_slice(seed: u64, h: usize, t: usize, d: usize) -> ModelSlice {
    let heads = (0..h)
        .map(|i| {
            let s = 10 * i as u64;
            (gaussian(seed, s, t, d), gaussian(seed, s + 1, t, d), gaussian(seed, s + 2, t, d))
        })
        .collect();
    let wo = gaussian(seed, 999, h * d, h * d).scale(1.0 / ((h * d) as f64).sqrt());
    ModelSlice::from_heads(heads, &wo).unwrap()
}

/// Straightforward per-head attention, with the heads concatenated before
/// the output projection and the mask applied as `-inf`.
fn reference_mha(heads: &[(Matrix, Matrix, Matrix)], wo: &Matrix, causal: bool) -> Matrix {
    let t = heads[0].0.rows();
    let d = heads[0].0.cols();
    let mut concat = Matrix::zeros(t, heads.len() * d);
    for (h, (k, q, v)) in heads.iter().enumerate() {
        for i in 0..t {
            let mut logits = vec![f64::NEG_INFINITY; t];
            for (j, logit) in logits.iter_mut().enumerate() {
                if causal && j > i {
                    continue;
                }
                let s: f64 = (0..d).map(|c| q[(i, c)] * k[(j, c)]).sum();
                *logit = s / (d as f64).sqrt();
            }
            let weights: Vec<f64> = logits.iter().map(|x| x.exp()).collect();
            let z: f64 = weights.iter().sum();
            for c in 0..d {
                concat[(i, h * d + c)] = (0..t).map(|j| weights[j] / z * v[(j, c)]).sum();
            }
        }
    }
    concat.mul(wo)
}

fn plans_for(slice: &ModelSlice, method: Method, rank_k: usize, rank_v: usize) -> Vec<CompressionPlan> {
    (0..slice.groups().kv_heads())
        .map(|g| build_plan(method, &slice.group_caches(g), 0, g, rank_k, rank_v, None).unwrap())
        .collect()
}

fn with_exact_values(mut plans: Vec<CompressionPlan>, d: usize) -> Vec<CompressionPlan> {
    for p in &mut plans {
        p.value = LowRankMap::Identity { dim: d };
        p.rank_v = d;
    }
    plans
}

#[test]
fn forward_matches_reference_implementation() {
    let (t, d) = (8, 4);
    let heads: Vec<_> = (0..2)
        .map(|i| {
            let s = 3 * i;
            (gaussian(41, s, t, d), gaussian(41, s + 1, t, d), gaussian(41, s + 2, t, d))
        })
        .collect();
    let wo = gaussian(41, 9, 2 * d, 2 * d);
    let slice = ModelSlice::from_heads(heads.clone(), &wo).unwrap();
    for causal in [false, true] {
        let got = mha_forward(&slice, causal);
        let want = reference_mha(&heads, &wo, causal);
        assert!(got.sub(&want).max_abs() < 1e-12 * want.max_abs(), "causal={causal}");
    }
}

#[test]
fn lossless_plans_reproduce_exact_output() {
    let slice = random_slice(42, 2, 12, 4);
    let exact = mha_forward(&slice, true);
    for method in Method::ALL {
        let plans = plans_for(&slice, method, 4, 4);
        let out = compressed_mha_forward(&slice, &plans, true).unwrap();
        assert!(out.sub(&exact).fro_norm_sq() / exact.fro_norm_sq() < 1e-20, "{method}");
    }
}

#[test]
fn rank_one_keys_are_compressed_exactly() {
    let (t, d) = (10, 4);
    let k = low_rank(43, 0, t, d, 1);
    let q = gaussian(43, 1, t, d);
    let v = gaussian(43, 2, t, d);
    let slice = ModelSlice::from_heads(vec![(k, q, v)], &Matrix::identity(d)).unwrap();
    let plans = with_exact_values(plans_for(&slice, Method::Kqsvd, 1, d), d);
    let exact = mha_forward(&slice, true);
    let out = compressed_mha_forward(&slice, &plans, true).unwrap();
    assert!(out.sub(&exact).fro_norm_sq() / exact.fro_norm_sq() < 1e-18);
}

#[test]
fn kqsvd_output_error_beats_ksvd_when_gap_is_large() {
    let (t, d, r) = (16, 8, 4);
    let mut compared = 0;
    for seed in 0..40 {
        let k = gaussian(seed, 100, t, d);
        let q = gaussian(seed, 101, t, d).mul(&gaussian(seed, 102, d, d));
        let v = gaussian(seed, 103, t, d);
        if error_gap_ksvd(&k, &q, r).unwrap().gap <= 1e-3 {
            continue;
        }
        compared += 1;
        let slice = ModelSlice::from_heads(vec![(k, q, v)], &Matrix::identity(d)).unwrap();
        let exact = mha_forward(&slice, false);
        let err = |m| {
            let plans = with_exact_values(plans_for(&slice, m, r, d), d);
            let out = compressed_mha_forward(&slice, &plans, false).unwrap();
            out.sub(&exact).fro_norm_sq() / exact.fro_norm_sq()
        };
        let (kq, ks) = (err(Method::Kqsvd), err(Method::Ksvd));
        assert!(kq <= ks, "seed {seed}: kqsvd {kq} > ksvd {ks}");
    }
    assert!(compared >= 20);
}

#[test]
fn bound_vanishes_without_perturbation() {
    let slice = random_slice(44, 3, 10, 4);
    let approx: Vec<_> = slice
        .keys()
        .iter()
        .zip(slice.values())
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    assert_eq!(perturbation_bound(&slice, &approx).unwrap(), 0.0);
}

#[test]
fn bound_dominates_error_from_key_compression() {
    let slice = random_slice(45, 3, 16, 6);
    let plans = with_exact_values(plans_for(&slice, Method::Ksvd, 2, 6), 6);
    let approx = plan_approximations(&slice, &plans).unwrap();
    let bound = perturbation_bound(&slice, &approx).unwrap();
    let actual = spectral_norm(
        &compressed_mha_forward(&slice, &plans, false)
            .unwrap()
            .sub(&mha_forward(&slice, false)),
    )
    .unwrap();
    assert!(bound > 0.0 && actual <= bound);
}

#[test]
fn zero_output_projection_annihilates_everything() {
    let k = gaussian(46, 0, 8, 4);
    let slice = ModelSlice::from_heads(
        vec![(k.clone(), gaussian(46, 1, 8, 4), gaussian(46, 2, 8, 4))],
        &Matrix::zeros(4, 4),
    )
    .unwrap();
    let plans = plans_for(&slice, Method::Ksvd, 1, 1);
    let approx = plan_approximations(&slice, &plans).unwrap();
    assert_eq!(perturbation_bound(&slice, &approx).unwrap(), 0.0);
    let out = compressed_mha_forward(&slice, &plans, false).unwrap();
    assert_eq!(out.sub(&mha_forward(&slice, false)).max_abs(), 0.0);
}

#[test]
fn report_on_lossless_plans_is_zero() {
    let slice = random_slice(47, 2, 12, 4);
    let plans: Vec<_> = Method::ALL.iter().map(|&m| (m, plans_for(&slice, m, 4, 4))).collect();
    let refs: Vec<_> = plans.iter().map(|(m, p)| (*m, p.as_slice())).collect();
    let report = error_report(&slice, &refs, true).unwrap();
    for row in &report.rows {
        for x in [row.err_k, row.err_q, row.err_v, row.err_kqt, row.err_out] {
            assert!(x <= 1e-10, "{row:?}");
        }
        assert!(row.err_out_spectral <= row.bound + 1e-8 * (1.0 + row.bound));
    }
}

#[test]
fn report_scores_ordering_with_exact_values() {
    let slice = random_slice(48, 2, 20, 6);
    let plans: Vec<_> = Method::ALL
        .iter()
        .map(|&m| (m, with_exact_values(plans_for(&slice, m, 2, 6), 6)))
        .collect();
    let refs: Vec<_> = plans.iter().map(|(m, p)| (*m, p.as_slice())).collect();
    let report = error_report(&slice, &refs, true).unwrap();
    let kq = report.get(Method::Kqsvd).unwrap();
    for row in &report.rows {
        assert_eq!(row.err_v, 0.0);
        assert!(kq.err_kqt <= row.err_kqt + 1e-9);
    }
    let again = error_report(&slice, &refs, true).unwrap();
    assert_eq!(report, again);
}

#[test]
fn report_rejects_mixed_ranks() {
    let slice = random_slice(49, 2, 12, 4);
    let a = plans_for(&slice, Method::Ksvd, 2, 2);
    let b = plans_for(&slice, Method::Kqsvd, 3, 2);
    let err = error_report(&slice, &[(Method::Ksvd, &a), (Method::Kqsvd, &b)], true);
    assert!(matches!(err, Err(Error::InconsistentRanks(_))));
}

#[test]
fn compressed_forward_rejects_wrong_plans() {
    let slice = random_slice(50, 2, 12, 4);
    let plans = plans_for(&slice, Method::Ksvd, 2, 2);
    assert!(matches!(
        compressed_mha_forward(&slice, &plans[..1], false),
        Err(Error::PlanMismatch(_))
    ));
    let other = random_slice(50, 2, 12, 6);
    let wrong = plans_for(&other, Method::Ksvd, 2, 2);
    assert!(compressed_mha_forward(&slice, &wrong, false).is_err());
}

#[test]
fn grouped_plans_share_factors() {
    let keys = vec![gaussian(51, 0, 12, 4)];
    let values = vec![gaussian(51, 1, 12, 4)];
    let queries: Vec<_> = (0..3).map(|i| gaussian(51, 2 + i, 12, 4)).collect();
    let wo = gaussian(51, 9, 12, 12);
    let slices = (0..3).map(|i| wo.row_block(4 * i..4 * (i + 1))).collect();
    let slice = ModelSlice::new(keys, values, queries, slices, GroupMap::contiguous(3, 1).unwrap()).unwrap();
    let plan = &plans_for(&slice, Method::Kqsvd, 2, 2)[0];
    let stacked = Matrix::vstack(&slice.queries().iter().collect::<Vec<_>>()).unwrap();
    let direct = kqsvd(&slice.keys()[0], &stacked, 2).unwrap();
    assert!(plan.key.operator().sub(&direct.operator()).max_abs() < 1e-12);
    let ks = ksvd(&slice.keys()[0], 2).unwrap();
    assert_eq!(ks.basis.shape(), (4, 2));
}
