//! Bundle directories: `manifest.json` plus one `KQC1` file per tensor.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use kqsvd_core::cachestore::{CacheBundle, LayerCaches, Manifest};
use kqsvd_core::Matrix;
use rayon::prelude::*;

use crate::format::{read_tensor_expect, write_file, FormatError};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, thiserror::Error)]
pub enum BundleError {
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("{}: invalid manifest: {source}", path.display())]
    Manifest {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("{}: {source}", path.display())]
    Invalid {
        path: PathBuf,
        source: kqsvd_core::Error,
    },
    #[error("{}: refusing to replace a directory that is not a bundle", path.display())]
    NotABundle { path: PathBuf },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
}

impl BundleError {
    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        BundleError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CacheKind {
    Key,
    Query,
    Value,
}

impl CacheKind {
    fn letter(self) -> char {
        match self {
            CacheKind::Key => 'K',
            CacheKind::Query => 'Q',
            CacheKind::Value => 'V',
        }
    }
}

/// `seq{s}_layer{l}_head{i}_{K|Q|V}.bin`. Keys and values are indexed by KV
/// head, queries by query head.
pub fn cache_file(seq: usize, layer: usize, head: usize, kind: CacheKind) -> String {
    format!("seq{seq}_layer{layer}_head{head}_{}.bin", kind.letter())
}

pub fn wo_file(layer: usize) -> String {
    format!("layer{layer}_WO.bin")
}

/// Prepares a fresh staging directory next to `dir`.
pub(crate) fn staging_dir(dir: &Path) -> Result<PathBuf, BundleError> {
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    let staging = dir.with_file_name(format!(".{name}.partial{}", std::process::id()));
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| BundleError::io(&staging, e))?;
    }
    if let Some(parent) = staging.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| BundleError::io(parent, e))?;
    }
    fs::create_dir(&staging).map_err(|e| BundleError::io(&staging, e))?;
    Ok(staging)
}

/// Moves a completed staging directory onto `dir`, replacing a previous
/// output that carries `marker`.
pub(crate) fn publish_dir(staging: &Path, dir: &Path, marker: &str) -> Result<(), BundleError> {
    if dir.exists() {
        let empty = fs::read_dir(dir)
            .map_err(|e| BundleError::io(dir, e))?
            .next()
            .is_none();
        if !empty && !dir.join(marker).is_file() {
            let _ = fs::remove_dir_all(staging);
            return Err(BundleError::NotABundle {
                path: dir.to_path_buf(),
            });
        }
        fs::remove_dir_all(dir).map_err(|e| BundleError::io(dir, e))?;
    }
    fs::rename(staging, dir).map_err(|e| BundleError::io(dir, e))
}

fn write_into(bundle: &CacheBundle, dir: &Path) -> Result<(), BundleError> {
    let m = bundle.manifest();
    let mut jobs: Vec<(String, &Matrix)> = Vec::new();
    for (s, seq) in bundle.sequences().iter().enumerate() {
        for (l, layer) in seq.iter().enumerate() {
            for (g, k) in layer.keys.iter().enumerate() {
                jobs.push((cache_file(s, l, g, CacheKind::Key), k));
            }
            for (g, v) in layer.values.iter().enumerate() {
                jobs.push((cache_file(s, l, g, CacheKind::Value), v));
            }
            for (i, q) in layer.queries.iter().enumerate() {
                jobs.push((cache_file(s, l, i, CacheKind::Query), q));
            }
        }
    }
    for l in 0..m.layers {
        jobs.push((wo_file(l), bundle.wo(l)));
    }
    jobs.par_iter().try_for_each(|(name, mat)| {
        let path = dir.join(name);
        write_file(&path, &crate::format::encode_tensor(mat, m.dtype))
    })?;
    let json = serde_json::to_vec_pretty(m).expect("manifest serializes");
    write_file(&dir.join(MANIFEST), &json)?;
    Ok(())
}

/// Writes `bundle` to `dir`. Tensors go to a staging directory first, the
/// manifest last, and the directory is renamed into place on success.
pub fn write_bundle(bundle: &CacheBundle, dir: &Path) -> Result<(), BundleError> {
    let staging = staging_dir(dir)?;
    if let Err(e) = write_into(bundle, &staging) {
        let _ = fs::remove_dir_all(&staging);
        return Err(e);
    }
    publish_dir(&staging, dir, MANIFEST)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, BundleError> {
    let path = dir.join(MANIFEST);
    let bytes = fs::read(&path).map_err(|e| FormatError::io(&path, e))?;
    let manifest: Manifest =
        serde_json::from_slice(&bytes).map_err(|source| BundleError::Manifest {
            path: path.clone(),
            source,
        })?;
    manifest
        .validate()
        .map_err(|source| BundleError::Invalid { path, source })?;
    Ok(manifest)
}

/// Reads and validates a bundle; tensors are widened to f64.
pub fn read_bundle(dir: &Path) -> Result<CacheBundle, BundleError> {
    let m = read_manifest(dir)?;
    let cache_shape = (m.tokens, m.head_dim);
    let read = |name: String, shape| read_tensor_expect(&dir.join(name), shape, m.dtype);

    let caches = (0..m.sequences)
        .into_par_iter()
        .map(|s| {
            (0..m.layers)
                .map(|l| {
                    let load = |kind, n: usize| {
                        (0..n)
                            .map(|h| read(cache_file(s, l, h, kind), cache_shape))
                            .collect::<Result<Vec<_>, _>>()
                    };
                    Ok(LayerCaches {
                        keys: load(CacheKind::Key, m.kv_heads)?,
                        values: load(CacheKind::Value, m.kv_heads)?,
                        queries: load(CacheKind::Query, m.query_heads)?,
                    })
                })
                .collect::<Result<Vec<_>, FormatError>>()
        })
        .collect::<Result<Vec<_>, _>>()?;
    let wo = (0..m.layers)
        .map(|l| read(wo_file(l), m.wo_shape()))
        .collect::<Result<Vec<_>, _>>()?;
    CacheBundle::new(m, caches, wo).map_err(|source| BundleError::Invalid {
        path: dir.to_path_buf(),
        source,
    })
}
