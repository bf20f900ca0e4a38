//! Calibration, evaluation, the unbalance sweep and the randomized theorem
//! checks behind the CLI.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use kqsvd_core::attention::{
    error_report, mha_forward, perturbation_bound, plan_approximations, GroupMap, ModelSlice,
};
use kqsvd_core::cachestore::{aggregate, scale_unbalance, CacheBundle};
use kqsvd_core::compress::{
    build_plan, error_gap_ksvd, gqa_kqsvd, kqsvd, ksvd, score_error, select_layer_ranks,
    CompressionPlan, LowRankMap, Method,
};
use kqsvd_core::linalg::{product_svd, spectral_norm};
use kqsvd_core::random::{gaussian_matrix, seeded_rng};
use kqsvd_core::{Error, Matrix, Result};
use rayon::prelude::*;

use crate::plans::{PlanDims, PlanSet, RankSpec};

/// Per-layer `(rank_k, rank_v)` for a bundle. Ranks come from the
/// head-averaged spectra of the aggregated caches, so they do not depend on
/// the method.
pub fn layer_ranks(bundle: &CacheBundle, ranks: RankSpec) -> Result<Vec<(usize, usize)>> {
    let m = bundle.manifest();
    match ranks {
        RankSpec::Rank(r) => {
            if r == 0 || r > m.head_dim {
                return Err(Error::InvalidRank {
                    rank: r,
                    max: m.head_dim,
                });
            }
            Ok(vec![(r, r); m.layers])
        }
        RankSpec::Epsilon(eps) => {
            let cal = aggregate(bundle);
            cal.layers()
                .par_iter()
                .map(|layer| {
                    let keys: Vec<&Matrix> = layer.keys.iter().collect();
                    let values: Vec<&Matrix> = layer.values.iter().collect();
                    select_layer_ranks(&keys, &values, eps)
                })
                .collect()
        }
    }
}

fn epsilon_of(ranks: RankSpec) -> Option<f64> {
    match ranks {
        RankSpec::Epsilon(e) => Some(e),
        RankSpec::Rank(_) => None,
    }
}

/// Learns one plan per (layer, KV head) from all sequences of `bundle`.
pub fn calibrate(bundle: &CacheBundle, method: Method, ranks: RankSpec, seed: u64) -> Result<PlanSet> {
    Ok(calibrate_many(bundle, &[method], ranks, seed)?.remove(0))
}

/// [`calibrate`] for several methods sharing one rank choice.
pub fn calibrate_many(
    bundle: &CacheBundle,
    methods: &[Method],
    ranks: RankSpec,
    seed: u64,
) -> Result<Vec<PlanSet>> {
    let m = bundle.manifest();
    let layer_ranks = layer_ranks(bundle, ranks)?;
    let cal = aggregate(bundle);
    let slices: Vec<ModelSlice> = (0..m.layers).map(|l| cal.layer_slice(l)).collect();
    methods
        .iter()
        .map(|&method| {
            let layers = slices
                .par_iter()
                .enumerate()
                .map(|(l, slice)| {
                    let (rk, rv) = layer_ranks[l];
                    (0..m.kv_heads)
                        .map(|g| {
                            build_plan(method, &slice.group_caches(g), l, g, rk, rv, epsilon_of(ranks))
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(PlanSet {
                method,
                ranks,
                seed,
                dims: PlanDims::of(m),
                layers,
            })
        })
        .collect()
}

/// Index of a metric in [`EvalRow::values`].
pub const METRICS: [&str; 7] = [
    "err_K",
    "err_Q",
    "err_V",
    "err_KQT",
    "err_out",
    "bound",
    "err_out_spectral",
];

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    /// `None` for the mean over layers.
    pub layer: Option<usize>,
    pub method: Method,
    pub values: [f64; 7],
}

impl EvalRow {
    pub fn err_kqt(&self) -> f64 {
        self.values[3]
    }

    pub fn err_out(&self) -> f64 {
        self.values[4]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub methods: Vec<Method>,
    pub rows: Vec<EvalRow>,
}

impl Evaluation {
    pub fn mean(&self, method: Method) -> Option<&EvalRow> {
        self.rows
            .iter()
            .find(|r| r.layer.is_none() && r.method == method)
    }

    pub fn layer_rows(&self) -> impl Iterator<Item = &EvalRow> {
        self.rows.iter().filter(|r| r.layer.is_some())
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["layer", "method"];
        header.extend(METRICS);
        w.write_record(&header).expect("in-memory write");
        for row in &self.rows {
            let mut rec = vec![
                row.layer.map_or_else(|| "mean".to_string(), |l| l.to_string()),
                row.method.to_string(),
            ];
            rec.extend(row.values.iter().map(|v| format!("{v:e}")));
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii")
    }
}

fn check_plan_set(bundle: &CacheBundle, set: &PlanSet) -> Result<()> {
    let want = PlanDims::of(bundle.manifest());
    if set.dims != want {
        return Err(Error::PlanMismatch(format!(
            "{} plans were calibrated for {:?}, bundle has {:?}",
            set.method, set.dims, want
        )));
    }
    Ok(())
}

/// Errors of each plan set on every (sequence, layer) of `bundle`, averaged
/// over sequences, plus a mean-over-layers row per method. All plan sets
/// must share per-layer ranks.
pub fn evaluate(bundle: &CacheBundle, sets: &[PlanSet], causal: bool) -> Result<Evaluation> {
    if sets.is_empty() {
        return Err(Error::InvalidConfig("no plan sets to evaluate".into()));
    }
    let mut seen = BTreeSet::new();
    for set in sets {
        check_plan_set(bundle, set)?;
        if !seen.insert(set.method) {
            return Err(Error::InvalidConfig(format!("method {} given twice", set.method)));
        }
    }
    let m = bundle.manifest();
    let cells: Vec<(usize, usize)> = (0..m.sequences)
        .flat_map(|s| (0..m.layers).map(move |l| (s, l)))
        .collect();
    let reports = cells
        .par_iter()
        .map(|&(s, l)| {
            let slice = bundle.layer_slice(s, l);
            let plans: Vec<(Method, &[CompressionPlan])> =
                sets.iter().map(|p| (p.method, p.layers[l].as_slice())).collect();
            error_report(&slice, &plans, causal)
        })
        .collect::<Result<Vec<_>>>()?;

    let n_seq = m.sequences as f64;
    let mut rows = Vec::new();
    for l in 0..m.layers {
        for (k, set) in sets.iter().enumerate() {
            let mut values = [0.0; 7];
            for (cell, report) in cells.iter().zip(&reports) {
                if cell.1 == l {
                    for (acc, x) in values.iter_mut().zip(report.rows[k].fields()) {
                        *acc += x;
                    }
                }
            }
            values.iter_mut().for_each(|v| *v /= n_seq);
            rows.push(EvalRow {
                layer: Some(l),
                method: set.method,
                values,
            });
        }
    }
    for set in sets {
        let mut values = [0.0; 7];
        for row in rows.iter().filter(|r| r.method == set.method) {
            for (acc, x) in values.iter_mut().zip(row.values) {
                *acc += x;
            }
        }
        values.iter_mut().for_each(|v| *v /= m.layers as f64);
        rows.push(EvalRow {
            layer: None,
            method: set.method,
            values,
        });
    }
    Ok(Evaluation {
        methods: sets.iter().map(|s| s.method).collect(),
        rows,
    })
}

/// Largest `‖P_a − P_b‖_F` over all (layer, group) key projectors.
pub fn max_key_projector_distance(a: &PlanSet, b: &PlanSet) -> f64 {
    a.layers
        .iter()
        .flatten()
        .zip(b.layers.iter().flatten())
        .map(|(pa, pb)| pa.key.operator().sub(&pb.key.operator()).fro_norm())
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub beta: f64,
    pub method: Method,
    pub err_out_mean: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sweep {
    pub rows: Vec<SweepRow>,
    /// `(β, max ‖P_eigen − P_ksvd‖_F)` when both methods were swept.
    pub eigen_ksvd_distance: Vec<(f64, f64)>,
}

impl Sweep {
    pub fn err(&self, beta: f64, method: Method) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.beta == beta && r.method == method)
            .map(|r| r.err_out_mean)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["beta", "method", "err_out_mean"])
            .expect("in-memory write");
        for r in &self.rows {
            w.write_record([r.beta.to_string(), r.method.to_string(), format!("{:e}", r.err_out_mean)])
                .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii")
    }
}

/// For each β, rescales `K ← βK`, `Q ← Q/β` in both bundles, recalibrates
/// every method on the scaled training bundle and evaluates on the scaled
/// evaluation bundle.
pub fn sweep_unbalance(
    train: &CacheBundle,
    eval: &CacheBundle,
    betas: &[f64],
    methods: &[Method],
    ranks: RankSpec,
    causal: bool,
    seed: u64,
) -> Result<Sweep> {
    if betas.is_empty() {
        return Err(Error::InvalidConfig("no β values given".into()));
    }
    let mut rows = Vec::new();
    let mut eigen_ksvd_distance = Vec::new();
    for &beta in betas {
        let scaled_train = scale_unbalance(train, beta)?;
        let scaled_eval = scale_unbalance(eval, beta)?;
        let sets = calibrate_many(&scaled_train, methods, ranks, seed)?;
        let ev = evaluate(&scaled_eval, &sets, causal)?;
        for &method in methods {
            rows.push(SweepRow {
                beta,
                method,
                err_out_mean: ev.mean(method).expect("evaluated").err_out(),
            });
        }
        let find = |m| sets.iter().find(|s| s.method == m);
        if let (Some(e), Some(k)) = (find(Method::Eigen), find(Method::Ksvd)) {
            eigen_ksvd_distance.push((beta, max_key_projector_distance(e, k)));
        }
    }
    Ok(Sweep {
        rows,
        eigen_ksvd_distance,
    })
}

/// Statement checked by [`verify`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Theorem {
    /// Output perturbation bound.
    Bound,
    /// K-SVD optimality gap identity.
    Gap,
    /// Stacked grouped-query solve.
    Gqa,
    /// Paired `K`/`Q` scaling invariance.
    Scaling,
}

/// One checked quantity: the worst normalized violation across trials.
/// `worst <= tolerance` passes; slack is `tolerance − worst`.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub worst: f64,
    pub tolerance: f64,
    pub violations: usize,
}

impl Check {
    fn new(name: &'static str, tolerance: f64) -> Self {
        Self {
            name,
            worst: f64::NEG_INFINITY,
            tolerance,
            violations: 0,
        }
    }

    fn record(&mut self, value: f64) {
        if value.is_nan() || value > self.tolerance {
            self.violations += 1;
        }
        if value.is_nan() || value > self.worst {
            self.worst = value;
        }
    }

    pub fn slack(&self) -> f64 {
        self.tolerance - self.worst
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerifyReport {
    pub theorem: Theorem,
    pub trials: usize,
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.violations == 0)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let _ = writeln!(
                out,
                "{:?} {}: {} trials, worst {:.3e} (tolerance {:.1e}, slack {:.3e}), {} violations",
                self.theorem, c.name, self.trials, c.worst, c.tolerance, c.slack(), c.violations
            );
        }
        out
    }
}

fn random_slice(seed: u64, trial: usize, h: usize, g: usize, t: usize, d: usize) -> Result<ModelSlice> {
    let mut rng = seeded_rng(seed, trial as u64);
    let keys = (0..g).map(|_| gaussian_matrix(&mut rng, t, d)).collect();
    let values = (0..g).map(|_| gaussian_matrix(&mut rng, t, d)).collect();
    let queries = (0..h).map(|_| gaussian_matrix(&mut rng, t, d)).collect();
    let big_d = h * d;
    let wo = gaussian_matrix(&mut rng, big_d, big_d).scale(1.0 / (big_d as f64).sqrt());
    let wo_slices = (0..h).map(|i| wo.row_block(i * d..(i + 1) * d)).collect();
    ModelSlice::new(keys, values, queries, wo_slices, GroupMap::contiguous(h, g)?)
}

fn verify_bound(seed: u64, trials: usize) -> Result<Vec<Check>> {
    let (h, t, d) = (4, 32, 8);
    let mut check = Check::new("actual - bound, relative to 1 + bound", 1e-8);
    let results = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let slice = random_slice(seed, trial, h, h, t, d)?;
            let rank = 1 + trial % (d - 1);
            let method = Method::ALL[trial % 3];
            let plans = (0..h)
                .map(|g| build_plan(method, &slice.group_caches(g), 0, g, rank, rank, None))
                .collect::<Result<Vec<_>>>()?;
            let approx = plan_approximations(&slice, &plans)?;
            let bound = perturbation_bound(&slice, &approx)?;
            let compressed = kqsvd_core::attention::compressed_mha_forward(&slice, &plans, false)?;
            let actual = spectral_norm(&compressed.sub(&mha_forward(&slice, false)))?;
            Ok((actual - bound) / (1.0 + bound))
        })
        .collect::<Result<Vec<f64>>>()?;
    results.into_iter().for_each(|x| check.record(x));
    Ok(vec![check])
}

fn verify_gap(seed: u64, trials: usize) -> Result<Vec<Check>> {
    let (t, d) = (32, 8);
    let mut identity = Check::new("|gap - (top energy - projected energy)| / ‖KQᵀ‖²", 1e-8);
    let mut sign = Check::new("-gap / ‖KQᵀ‖²", 1e-8);
    for trial in 0..trials {
        let mut rng = seeded_rng(seed, trial as u64);
        let k = if trial % 3 == 0 {
            let r = 1 + trial % (d - 1);
            gaussian_matrix(&mut rng, t, r).mul_t(&gaussian_matrix(&mut rng, d, r))
        } else {
            gaussian_matrix(&mut rng, t, d)
        };
        let q = gaussian_matrix(&mut rng, t, d);
        let rep = error_gap_ksvd(&k, &q, 1 + trial % d)?;
        identity.record(rep.identity_residual() / rep.total_energy);
        sign.record(-rep.gap / rep.total_energy);
    }
    Ok(vec![identity, sign])
}

fn verify_gqa(seed: u64, trials: usize) -> Result<Vec<Check>> {
    let (t, d, r) = (16, 8, 4);
    let mut sum = Check::new("|Σ head errors - stacked error| / stacked error", 1e-10);
    let mut opt = Check::new("|stacked error - Σ_{i>R} σ_i²| / Σ_{i>R} σ_i²", 1e-9);
    for trial in 0..trials {
        let mut rng = seeded_rng(seed, trial as u64);
        let m = if trial % 2 == 0 { 2 } else { 4 };
        let k = gaussian_matrix(&mut rng, t, d);
        let qs: Vec<Matrix> = (0..m).map(|_| gaussian_matrix(&mut rng, t, d)).collect();
        let refs: Vec<&Matrix> = qs.iter().collect();
        let g = gqa_kqsvd(&k, &refs, r)?;
        let s = g.pair.operator();
        let stacked = Matrix::vstack(&refs)?;
        let whole = score_error(&k, &stacked, &s);
        let per_head: f64 = qs.iter().map(|q| score_error(&k, q, &s)).sum();
        let tail = product_svd(&k, &stacked)?.tail_energy(r);
        sum.record((per_head - whole).abs() / whole);
        opt.record((whole - tail).abs() / tail);
    }
    Ok(vec![sum, opt])
}

fn verify_scaling(seed: u64, trials: usize) -> Result<Vec<Check>> {
    let (t, d) = (32, 8);
    let mut kq = Check::new("KQ-SVD score reconstruction change / ‖KQᵀ‖", 1e-8);
    let mut ks = Check::new("K-SVD score reconstruction change / ‖KQᵀ‖", 1e-8);
    for trial in 0..trials {
        let mut rng = seeded_rng(seed, trial as u64);
        let beta = [0.1, 10.0, 1000.0][trial % 3];
        let r = 1 + trial % d;
        let k = gaussian_matrix(&mut rng, t, d);
        let q = gaussian_matrix(&mut rng, t, d);
        let (kb, qb) = (k.scale(beta), q.scale(1.0 / beta));
        let norm = k.mul_t(&q).fro_norm();
        let scores = |k: &Matrix, q: &Matrix, map: LowRankMap| map.reconstruct(k).mul_t(q);
        let base = scores(&k, &q, LowRankMap::Factors(kqsvd(&k, &q, r)?));
        let scaled = scores(&kb, &qb, LowRankMap::Factors(kqsvd(&kb, &qb, r)?));
        kq.record(scaled.sub(&base).fro_norm() / norm);
        let base = scores(&k, &q, LowRankMap::Projection(ksvd(&k, r)?));
        let scaled = scores(&kb, &qb, LowRankMap::Projection(ksvd(&kb, r)?));
        ks.record(scaled.sub(&base).fro_norm() / norm);
    }
    Ok(vec![kq, ks])
}

/// Runs `trials` seeded random instances of one theorem's identities.
pub fn verify(theorem: Theorem, seed: u64, trials: usize) -> Result<VerifyReport> {
    if trials == 0 {
        return Err(Error::InvalidConfig("trials must be at least 1".into()));
    }
    let checks = match theorem {
        Theorem::Bound => verify_bound(seed, trials)?,
        Theorem::Gap => verify_gap(seed, trials)?,
        Theorem::Gqa => verify_gqa(seed, trials)?,
        Theorem::Scaling => verify_scaling(seed, trials)?,
    };
    Ok(VerifyReport {
        theorem,
        trials,
        checks,
    })
}
