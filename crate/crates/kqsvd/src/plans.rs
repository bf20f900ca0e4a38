//! Plan directories written by `calibrate`: `plans.json` plus f64 `KQC1`
//! files holding each plan's factors.

use std::fs;
use std::path::Path;

use kqsvd_core::cachestore::{Dtype, Manifest};
use kqsvd_core::compress::{
    CompressionPlan, FactorMethod, FactorPair, LowRankMap, Method, Projection, ProjectionMethod,
    Q_ERROR_DEFINITION,
};
use kqsvd_core::Matrix;
use serde::{Deserialize, Serialize};

use crate::bundle::{publish_dir, staging_dir, BundleError};
use crate::format::{read_tensor_expect, write_tensor, FormatError};

pub const PLANS_FILE: &str = "plans.json";

/// Dimensions a plan set was calibrated for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanDims {
    pub layers: usize,
    pub query_heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
}

impl PlanDims {
    pub fn of(m: &Manifest) -> Self {
        Self {
            layers: m.layers,
            query_heads: m.query_heads,
            kv_heads: m.kv_heads,
            head_dim: m.head_dim,
        }
    }
}

/// How ranks were chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankSpec {
    Epsilon(f64),
    Rank(usize),
}

/// One method's plans for every (layer, KV head).
#[derive(Clone, Debug, PartialEq)]
pub struct PlanSet {
    pub method: Method,
    pub ranks: RankSpec,
    pub seed: u64,
    pub dims: PlanDims,
    /// `layers[l][g]`.
    pub layers: Vec<Vec<CompressionPlan>>,
}

impl PlanSet {
    pub fn layer_ranks(&self) -> Vec<(usize, usize)> {
        self.layers
            .iter()
            .map(|groups| (groups[0].rank_k, groups[0].rank_v))
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum MapRecord {
    Identity {
        dim: usize,
    },
    Projection {
        method: ProjectionMethod,
        rank: usize,
        tie_at_cut: bool,
        basis: String,
    },
    Factors {
        method: FactorMethod,
        rank: usize,
        tie_at_cut: bool,
        a: String,
        b: String,
    },
}

#[derive(Serialize, Deserialize)]
struct GroupRecord {
    group: usize,
    degenerate: bool,
    rank_deficient_queries: bool,
    key: MapRecord,
    value: MapRecord,
}

#[derive(Serialize, Deserialize)]
struct LayerRecord {
    layer: usize,
    rank_k: usize,
    rank_v: usize,
    groups: Vec<GroupRecord>,
}

#[derive(Serialize, Deserialize)]
struct PlansFile {
    method: Method,
    ranks: RankSpec,
    seed: u64,
    dims: PlanDims,
    q_error_definition: String,
    layers: Vec<LayerRecord>,
}

fn stem(layer: usize, group: usize, part: &str) -> String {
    format!("layer{layer}_group{group}_{part}")
}

fn record_map(
    map: &LowRankMap,
    stem: &str,
    tensors: &mut Vec<(String, Matrix)>,
) -> MapRecord {
    match map {
        LowRankMap::Identity { dim } => MapRecord::Identity { dim: *dim },
        LowRankMap::Projection(p) => {
            let basis = format!("{stem}_basis.bin");
            tensors.push((basis.clone(), p.basis.clone()));
            MapRecord::Projection {
                method: p.method,
                rank: p.rank,
                tie_at_cut: p.tie_at_cut,
                basis,
            }
        }
        LowRankMap::Factors(f) => {
            let (a, b) = (format!("{stem}_A.bin"), format!("{stem}_B.bin"));
            tensors.push((a.clone(), f.a.clone()));
            tensors.push((b.clone(), f.b.clone()));
            MapRecord::Factors {
                method: f.method,
                rank: f.rank,
                tie_at_cut: f.tie_at_cut,
                a,
                b,
            }
        }
    }
}

fn load_map(dir: &Path, record: MapRecord, d: usize) -> Result<LowRankMap, BundleError> {
    let check_rank = |rank: usize| {
        if rank == 0 || rank > d {
            Err(BundleError::Invalid {
                path: dir.join(PLANS_FILE),
                source: kqsvd_core::Error::InvalidRank { rank, max: d },
            })
        } else {
            Ok(())
        }
    };
    let read = |name: &str, rank: usize| -> Result<Matrix, FormatError> {
        read_tensor_expect(&dir.join(name), (d, rank), Dtype::F64)
    };
    Ok(match record {
        MapRecord::Identity { dim } => {
            if dim != d {
                return Err(BundleError::Invalid {
                    path: dir.join(PLANS_FILE),
                    source: kqsvd_core::Error::PlanMismatch(format!(
                        "identity plan of dimension {dim}, expected {d}"
                    )),
                });
            }
            LowRankMap::Identity { dim }
        }
        MapRecord::Projection {
            method,
            rank,
            tie_at_cut,
            basis,
        } => {
            check_rank(rank)?;
            LowRankMap::Projection(Projection {
                basis: read(&basis, rank)?,
                method,
                rank,
                tie_at_cut,
            })
        }
        MapRecord::Factors {
            method,
            rank,
            tie_at_cut,
            a,
            b,
        } => {
            check_rank(rank)?;
            LowRankMap::Factors(FactorPair {
                a: read(&a, rank)?,
                b: read(&b, rank)?,
                method,
                rank,
                tie_at_cut,
            })
        }
    })
}

fn write_into(set: &PlanSet, dir: &Path) -> Result<(), BundleError> {
    let mut tensors = Vec::new();
    let layers = set
        .layers
        .iter()
        .enumerate()
        .map(|(l, groups)| LayerRecord {
            layer: l,
            rank_k: groups[0].rank_k,
            rank_v: groups[0].rank_v,
            groups: groups
                .iter()
                .map(|p| GroupRecord {
                    group: p.group,
                    degenerate: p.degenerate,
                    rank_deficient_queries: p.rank_deficient_queries,
                    key: record_map(&p.key, &stem(l, p.group, "key"), &mut tensors),
                    value: record_map(&p.value, &stem(l, p.group, "value"), &mut tensors),
                })
                .collect(),
        })
        .collect();
    for (name, m) in &tensors {
        write_tensor(&dir.join(name), m, Dtype::F64)?;
    }
    let file = PlansFile {
        method: set.method,
        ranks: set.ranks,
        seed: set.seed,
        dims: set.dims,
        q_error_definition: Q_ERROR_DEFINITION.into(),
        layers,
    };
    let json = serde_json::to_vec_pretty(&file).expect("plans serialize");
    crate::format::write_file(&dir.join(PLANS_FILE), &json)?;
    Ok(())
}

pub fn write_plans(set: &PlanSet, dir: &Path) -> Result<(), BundleError> {
    let staging = staging_dir(dir)?;
    if let Err(e) = write_into(set, &staging) {
        let _ = fs::remove_dir_all(&staging);
        return Err(e);
    }
    publish_dir(&staging, dir, PLANS_FILE)
}

pub fn read_plans(dir: &Path) -> Result<PlanSet, BundleError> {
    let path = dir.join(PLANS_FILE);
    let bytes = fs::read(&path).map_err(|e| FormatError::io(&path, e))?;
    let file: PlansFile = serde_json::from_slice(&bytes).map_err(|source| BundleError::Manifest {
        path: path.clone(),
        source,
    })?;
    let invalid = |msg: String| BundleError::Invalid {
        path: path.clone(),
        source: kqsvd_core::Error::PlanMismatch(msg),
    };
    if file.layers.len() != file.dims.layers {
        return Err(invalid(format!(
            "{} layer records for {} layers",
            file.layers.len(),
            file.dims.layers
        )));
    }
    let d = file.dims.head_dim;
    let mut layers = Vec::with_capacity(file.layers.len());
    for (l, rec) in file.layers.into_iter().enumerate() {
        if rec.layer != l || rec.groups.len() != file.dims.kv_heads {
            return Err(invalid(format!("layer record {l} is malformed")));
        }
        let mut groups = Vec::with_capacity(rec.groups.len());
        for (g, gr) in rec.groups.into_iter().enumerate() {
            if gr.group != g {
                return Err(invalid(format!("layer {l}: group {} out of order", gr.group)));
            }
            groups.push(CompressionPlan {
                layer: l,
                group: g,
                method: file.method,
                key: load_map(dir, gr.key, d)?,
                value: load_map(dir, gr.value, d)?,
                epsilon: match file.ranks {
                    RankSpec::Epsilon(e) => Some(e),
                    RankSpec::Rank(_) => None,
                },
                rank_k: rec.rank_k,
                rank_v: rec.rank_v,
                degenerate: gr.degenerate,
                rank_deficient_queries: gr.rank_deficient_queries,
            });
        }
        layers.push(groups);
    }
    Ok(PlanSet {
        method: file.method,
        ranks: file.ranks,
        seed: file.seed,
        dims: file.dims,
        layers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_names() {
        let mut tensors = Vec::new();
        let p = Projection {
            basis: Matrix::identity(3).columns(0..2),
            method: ProjectionMethod::Ksvd,
            rank: 2,
            tie_at_cut: false,
        };
        let rec = record_map(&LowRankMap::Projection(p), &stem(1, 0, "key"), &mut tensors);
        assert_eq!(tensors[0].0, "layer1_group0_key_basis.bin");
        assert!(matches!(rec, MapRecord::Projection { rank: 2, .. }));
        let rec = record_map(&LowRankMap::Identity { dim: 3 }, &stem(0, 0, "value"), &mut tensors);
        assert_eq!(tensors.len(), 1);
        let json = serde_json::to_value(&rec).unwrap();
        assert_eq!(json, serde_json::json!({"kind": "identity", "dim": 3}));
    }

    #[test]
    fn rank_spec_serializes_tagged() {
        let json = serde_json::to_string(&RankSpec::Epsilon(0.1)).unwrap();
        assert_eq!(json, r#"{"epsilon":0.1}"#);
        let back: RankSpec = serde_json::from_str(r#"{"rank":4}"#).unwrap();
        assert_eq!(back, RankSpec::Rank(4));
    }
}
