//! In-memory cache bundles: per (sequence, layer, head) `K`, `Q`, `V` caches
//! plus per-layer output projections, described by a [`Manifest`].
//!
//! File IO lives in the std companion crate; this module holds the data
//! model, its validation, calibration aggregation, the paired `K`/`Q`
//! rescaling and the synthetic generator.

mod synth;

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

pub use synth::{gen_synthetic, SynthConfig};

use crate::attention::{GroupMap, ModelSlice};
use crate::error::{mismatch, Error, Result};
use crate::linalg::Matrix;

/// Scalar type of tensors on disk. In memory everything is `f64`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    #[default]
    F32,
    F64,
}

impl Dtype {
    pub fn tag(self) -> u32 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_tag(tag: u32) -> Option<Self> {
        match tag {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    /// Rounds `x` to the nearest value representable in this dtype.
    pub fn round(self, x: f64) -> f64 {
        match self {
            Dtype::F32 => x as f32 as f64,
            Dtype::F64 => x,
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        })
    }
}

impl FromStr for Dtype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Dtype::F32),
            "f64" => Ok(Dtype::F64),
            other => Err(Error::InvalidConfig(format!("unknown dtype '{other}'"))),
        }
    }
}

/// Bundle description, serialized as `manifest.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub model: String,
    pub layers: usize,
    pub query_heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
    pub model_dim: usize,
    pub tokens: usize,
    pub sequences: usize,
    pub dtype: Dtype,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position_encoding: Option<String>,
    /// Query heads served by each KV head. Empty means contiguous groups.
    #[serde(default)]
    pub groups: Vec<Vec<usize>>,
}

impl Manifest {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("layers", self.layers),
            ("query_heads", self.query_heads),
            ("kv_heads", self.kv_heads),
            ("head_dim", self.head_dim),
            ("model_dim", self.model_dim),
            ("tokens", self.tokens),
            ("sequences", self.sequences),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, n)| *n == 0) {
            return Err(Error::InvalidConfig(format!("manifest field {name} is zero")));
        }
        if self.calibration_rows().is_none() {
            return Err(Error::InvalidConfig("tokens × sequences overflows".into()));
        }
        self.group_map().map(|_| ())
    }

    /// Group map from `groups`, or contiguous groups when none are listed.
    pub fn group_map(&self) -> Result<GroupMap> {
        if self.groups.is_empty() {
            return GroupMap::contiguous(self.query_heads, self.kv_heads);
        }
        let map = GroupMap::from_groups(self.groups.clone())?;
        if map.kv_heads() != self.kv_heads || map.q_heads() != self.query_heads {
            return Err(Error::InvalidGroups(format!(
                "group map covers {} query heads in {} groups, manifest says {} and {}",
                map.q_heads(),
                map.kv_heads(),
                self.query_heads,
                self.kv_heads
            )));
        }
        if map.members(0).len() * self.kv_heads != self.query_heads
            || map.groups().iter().any(|m| m.len() != map.members(0).len())
        {
            return Err(Error::InvalidGroups("groups differ in size".into()));
        }
        Ok(map)
    }

    /// Group size `m = h / g`.
    pub fn group_size(&self) -> usize {
        self.query_heads / self.kv_heads
    }

    /// Rows of each aggregated calibration matrix, `n_seq · T`.
    pub fn calibration_rows(&self) -> Option<usize> {
        self.sequences.checked_mul(self.tokens)
    }

    /// Shape of the per-layer output projection `W^O`.
    pub fn wo_shape(&self) -> (usize, usize) {
        (self.query_heads * self.head_dim, self.model_dim)
    }
}

/// Caches of one layer: `keys`/`values` per KV head, `queries` per query head.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerCaches {
    pub keys: Vec<Matrix>,
    pub values: Vec<Matrix>,
    pub queries: Vec<Matrix>,
}

impl LayerCaches {
    fn check(&self, m: &Manifest, rows: usize, what: &str) -> Result<()> {
        if self.keys.len() != m.kv_heads
            || self.values.len() != m.kv_heads
            || self.queries.len() != m.query_heads
        {
            return Err(mismatch(
                "LayerCaches",
                format!(
                    "{what}: {}/{}/{} K/V/Q heads, manifest has {}/{}/{}",
                    self.keys.len(),
                    self.values.len(),
                    self.queries.len(),
                    m.kv_heads,
                    m.kv_heads,
                    m.query_heads
                ),
            ));
        }
        let expected = (rows, m.head_dim);
        let all = self.keys.iter().chain(&self.values).chain(&self.queries);
        if let Some(bad) = all.into_iter().find(|c| c.shape() != expected) {
            return Err(mismatch(
                "LayerCaches",
                format!("{what}: cache {:?}, expected {expected:?}", bad.shape()),
            ));
        }
        Ok(())
    }

    fn map(&self, fk: impl Fn(&Matrix) -> Matrix, fq: impl Fn(&Matrix) -> Matrix) -> Self {
        Self {
            keys: self.keys.iter().map(&fk).collect(),
            values: self.values.clone(),
            queries: self.queries.iter().map(fq).collect(),
        }
    }
}

/// Validated bundle. `caches[s][l]` holds sequence `s`, layer `l`.
#[derive(Clone, Debug, PartialEq)]
pub struct CacheBundle {
    manifest: Manifest,
    caches: Vec<Vec<LayerCaches>>,
    wo: Vec<Matrix>,
}

impl CacheBundle {
    pub fn new(manifest: Manifest, caches: Vec<Vec<LayerCaches>>, wo: Vec<Matrix>) -> Result<Self> {
        manifest.validate()?;
        if caches.len() != manifest.sequences {
            return Err(mismatch(
                "CacheBundle",
                format!("{} sequences, manifest has {}", caches.len(), manifest.sequences),
            ));
        }
        for (s, seq) in caches.iter().enumerate() {
            if seq.len() != manifest.layers {
                return Err(mismatch(
                    "CacheBundle",
                    format!("sequence {s} has {} layers, manifest has {}", seq.len(), manifest.layers),
                ));
            }
            for (l, layer) in seq.iter().enumerate() {
                layer.check(&manifest, manifest.tokens, &format!("sequence {s} layer {l}"))?;
            }
        }
        if wo.len() != manifest.layers {
            return Err(mismatch(
                "CacheBundle",
                format!("{} output projections for {} layers", wo.len(), manifest.layers),
            ));
        }
        if let Some((l, w)) = wo.iter().enumerate().find(|(_, w)| w.shape() != manifest.wo_shape()) {
            return Err(mismatch(
                "CacheBundle",
                format!("layer {l} W^O is {:?}, expected {:?}", w.shape(), manifest.wo_shape()),
            ));
        }
        Ok(Self { manifest, caches, wo })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn layer(&self, seq: usize, layer: usize) -> &LayerCaches {
        &self.caches[seq][layer]
    }

    pub fn sequences(&self) -> &[Vec<LayerCaches>] {
        &self.caches
    }

    pub fn wo(&self, layer: usize) -> &Matrix {
        &self.wo[layer]
    }

    pub fn group_map(&self) -> GroupMap {
        self.manifest.group_map().expect("validated at construction")
    }

    /// Attention inputs for one sequence and layer.
    pub fn layer_slice(&self, seq: usize, layer: usize) -> ModelSlice {
        layer_slice(&self.manifest, &self.caches[seq][layer], &self.wo[layer])
    }
}

fn layer_slice(m: &Manifest, caches: &LayerCaches, wo: &Matrix) -> ModelSlice {
    let d = m.head_dim;
    let wo_slices = (0..m.query_heads)
        .map(|i| wo.row_block(i * d..(i + 1) * d))
        .collect();
    ModelSlice::new(
        caches.keys.clone(),
        caches.values.clone(),
        caches.queries.clone(),
        wo_slices,
        m.group_map().expect("validated manifest"),
    )
    .expect("validated bundle")
}

/// Per-layer caches with all sequences stacked row-wise.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationSet {
    manifest: Manifest,
    layers: Vec<LayerCaches>,
    wo: Vec<Matrix>,
}

impl CalibrationSet {
    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn layers(&self) -> &[LayerCaches] {
        &self.layers
    }

    pub fn rows(&self) -> usize {
        self.layers[0].keys[0].rows()
    }

    /// Stacked caches of one layer as a single attention slice.
    pub fn layer_slice(&self, layer: usize) -> ModelSlice {
        layer_slice(&self.manifest, &self.layers[layer], &self.wo[layer])
    }
}

/// Stacks every sequence's caches per (layer, head) in manifest order.
pub fn aggregate(bundle: &CacheBundle) -> CalibrationSet {
    let m = bundle.manifest();
    let stack = |layer: usize, pick: &dyn Fn(&LayerCaches) -> &Matrix| {
        let parts: Vec<&Matrix> = bundle.caches.iter().map(|seq| pick(&seq[layer])).collect();
        Matrix::vstack(&parts).expect("validated bundle")
    };
    let layers = (0..m.layers)
        .map(|l| LayerCaches {
            keys: (0..m.kv_heads).map(|g| stack(l, &|c| &c.keys[g])).collect(),
            values: (0..m.kv_heads).map(|g| stack(l, &|c| &c.values[g])).collect(),
            queries: (0..m.query_heads).map(|i| stack(l, &|c| &c.queries[i])).collect(),
        })
        .collect();
    CalibrationSet {
        manifest: m.clone(),
        layers,
        wo: bundle.wo.clone(),
    }
}

/// `K ← βK`, `Q ← Q/β` throughout; values and output projections untouched.
pub fn scale_unbalance(bundle: &CacheBundle, beta: f64) -> Result<CacheBundle> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::InvalidBeta(beta));
    }
    let inv = 1.0 / beta;
    let caches = bundle
        .caches
        .iter()
        .map(|seq| {
            seq.iter()
                .map(|c| c.map(|k| k.scale(beta), |q| q.scale(inv)))
                .collect()
        })
        .collect();
    Ok(CacheBundle {
        manifest: bundle.manifest.clone(),
        caches,
        wo: bundle.wo.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn manifest(h: usize, g: usize) -> Manifest {
        Manifest {
            model: "test".into(),
            layers: 1,
            query_heads: h,
            kv_heads: g,
            head_dim: 2,
            model_dim: 2 * h,
            tokens: 4,
            sequences: 2,
            dtype: Dtype::F64,
            seed: None,
            position_encoding: None,
            groups: Vec::new(),
        }
    }

    fn tiny_bundle() -> CacheBundle {
        let m = manifest(2, 1);
        let cache = |s: usize, k: usize| {
            Matrix::from_fn(4, 2, |r, c| (s * 100 + k * 10 + r * 2 + c) as f64 + 1.0)
        };
        let caches = (0..2)
            .map(|s| {
                vec![LayerCaches {
                    keys: vec![cache(s, 0)],
                    values: vec![cache(s, 1)],
                    queries: vec![cache(s, 2), cache(s, 3)],
                }]
            })
            .collect();
        CacheBundle::new(m, caches, vec![Matrix::identity(4)]).unwrap()
    }

    #[test]
    fn manifest_rejects_bad_groups() {
        assert!(manifest(8, 2).validate().is_ok());
        assert!(matches!(manifest(8, 3).validate(), Err(Error::InvalidGroups(_))));
        let mut m = manifest(4, 2);
        m.groups = vec![vec![0, 1, 2], vec![3]];
        assert!(m.validate().is_err());
        m.groups = vec![vec![0, 2], vec![1, 3]];
        assert!(m.validate().is_ok());
        let mut m = manifest(4, 2);
        m.tokens = 0;
        assert!(m.validate().is_err());
    }

    #[test]
    fn calibration_row_arithmetic() {
        let mut m = manifest(1, 1);
        m.sequences = 128;
        m.tokens = 2048;
        assert_eq!(m.calibration_rows(), Some(262_144));
    }

    #[test]
    fn aggregate_stacks_in_order() {
        let b = tiny_bundle();
        let cal = aggregate(&b);
        assert_eq!(cal.rows(), 8);
        let k = &cal.layers()[0].keys[0];
        assert_eq!(k.row_block(0..4), b.layer(0, 0).keys[0]);
        assert_eq!(k.row_block(4..8), b.layer(1, 0).keys[0]);
        assert_eq!(cal.layers()[0].queries[1].row_block(4..8), b.layer(1, 0).queries[1]);
    }

    #[test]
    fn unbalance_scaling() {
        let b = tiny_bundle();
        assert_eq!(scale_unbalance(&b, 1.0).unwrap(), b);
        let s = scale_unbalance(&b, 2.0).unwrap();
        let (k0, k1) = (&b.layer(0, 0).keys[0], &s.layer(0, 0).keys[0]);
        assert!((k1.fro_norm() - 2.0 * k0.fro_norm()).abs() < 1e-12 * k0.fro_norm());
        assert_eq!(s.layer(0, 0).values, b.layer(0, 0).values);
        assert!(scale_unbalance(&b, 0.0).is_err());
        assert!(scale_unbalance(&b, -1.0).is_err());
        assert!(scale_unbalance(&b, f64::NAN).is_err());
    }

    #[test]
    fn bundle_shape_validation() {
        let b = tiny_bundle();
        let mut caches = b.sequences().to_vec();
        caches[1][0].queries.pop();
        assert!(CacheBundle::new(b.manifest().clone(), caches, vec![Matrix::identity(4)]).is_err());
        let r = CacheBundle::new(b.manifest().clone(), b.sequences().to_vec(), vec![Matrix::identity(3)]);
        assert!(r.is_err());
    }
}
