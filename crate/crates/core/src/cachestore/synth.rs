use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{CacheBundle, Dtype, LayerCaches, Manifest};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::random::{gaussian_matrix, orthonormal_columns, polar_factor, seeded_rng};

/// Parameters of a synthetic bundle.
///
/// Each key cache is `a · U diag(σ) V_rᵀ + noise` with `σ_i = decay^{i-1}` for
/// `i ≤ intrinsic_rank`. `V` is fixed per (layer, KV head) and `U` is drawn
/// per sequence, so sequences share a model but not tokens. Query heads use a
/// right basis mixing their group's `V` with a fresh one, weighted by
/// `qk_correlation`. Values follow the same recipe with their own basis.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub layers: usize,
    pub query_heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
    pub model_dim: usize,
    pub tokens: usize,
    pub sequences: usize,
    pub intrinsic_rank: usize,
    pub spectral_decay: f64,
    pub noise_level: f64,
    pub qk_correlation: f64,
    pub seed: u64,
    /// Top singular value `a`. `None` picks `a` so that cache rows have mean
    /// squared norm `d`, keeping attention logits of order one.
    pub amplitude: Option<f64>,
    /// Index of the first generated sequence. Bundles with the same seed and
    /// disjoint sequence ranges share every model parameter.
    pub first_sequence: usize,
    pub dtype: Dtype,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            query_heads: 8,
            kv_heads: 8,
            head_dim: 32,
            model_dim: 256,
            tokens: 256,
            sequences: 8,
            intrinsic_rank: 32,
            spectral_decay: 0.8,
            noise_level: 0.01,
            qk_correlation: 0.3,
            seed: 0,
            amplitude: None,
            first_sequence: 0,
            dtype: Dtype::F32,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let invalid = |msg: alloc::string::String| Err(Error::InvalidConfig(msg));
        let counts = [
            self.layers,
            self.query_heads,
            self.kv_heads,
            self.head_dim,
            self.model_dim,
            self.tokens,
            self.sequences,
            self.intrinsic_rank,
        ];
        if counts.contains(&0) {
            return invalid("all counts must be at least 1".into());
        }
        if self.query_heads % self.kv_heads != 0 {
            return Err(Error::InvalidGroups(format!(
                "{} KV heads cannot evenly serve {} query heads",
                self.kv_heads, self.query_heads
            )));
        }
        if self.intrinsic_rank > self.head_dim || self.intrinsic_rank > self.tokens {
            return invalid(format!(
                "intrinsic rank {} exceeds d = {} or T = {}",
                self.intrinsic_rank, self.head_dim, self.tokens
            ));
        }
        if !(self.spectral_decay > 0.0 && self.spectral_decay.is_finite()) {
            return invalid(format!("spectral decay {} must be positive", self.spectral_decay));
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return invalid(format!("noise level {} must be nonnegative", self.noise_level));
        }
        if !(0.0..=1.0).contains(&self.qk_correlation) {
            return invalid(format!("qk correlation {} outside [0, 1]", self.qk_correlation));
        }
        if let Some(a) = self.amplitude {
            if !(a > 0.0 && a.is_finite()) {
                return invalid(format!("amplitude {a} must be positive"));
            }
        }
        Ok(())
    }

    /// `decay^{i-1}` for `i = 1..=intrinsic_rank`.
    pub fn spectrum(&self) -> Vec<f64> {
        (0..self.intrinsic_rank)
            .map(|i| libm::pow(self.spectral_decay, i as f64))
            .collect()
    }

    pub fn resolved_amplitude(&self) -> f64 {
        self.amplitude.unwrap_or_else(|| {
            let energy: f64 = self.spectrum().iter().map(|s| s * s).sum();
            libm::sqrt(self.tokens as f64 * self.head_dim as f64 / energy)
        })
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            model: "synthetic".into(),
            layers: self.layers,
            query_heads: self.query_heads,
            kv_heads: self.kv_heads,
            head_dim: self.head_dim,
            model_dim: self.model_dim,
            tokens: self.tokens,
            sequences: self.sequences,
            dtype: self.dtype,
            seed: Some(self.seed),
            position_encoding: None,
            groups: Vec::new(),
        }
    }
}

struct HeadModel {
    key_basis: Matrix,
    value_basis: Matrix,
}

struct LayerModel {
    wo: Matrix,
    kv: Vec<HeadModel>,
    query_bases: Vec<Matrix>,
}

/// Largest singular value of a synthetic output projection.
const WO_NORM: f64 = 2.0;

fn draw_wo(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Result<Matrix> {
    let n = rows.min(cols);
    let u = orthonormal_columns(rng, rows, n)?;
    let v = orthonormal_columns(rng, cols, n)?;
    let mut s: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..WO_NORM)).collect();
    s[0] = WO_NORM;
    Ok(u.scale_columns(&s).mul_t(&v))
}

fn draw_model(cfg: &SynthConfig) -> Result<Vec<LayerModel>> {
    let mut rng = seeded_rng(cfg.seed, 0);
    let d = cfg.head_dim;
    let m = cfg.query_heads / cfg.kv_heads;
    let rho = cfg.qk_correlation;
    let fresh_weight = libm::sqrt(1.0 - rho * rho);
    (0..cfg.layers)
        .map(|_| {
            let wo = draw_wo(&mut rng, cfg.query_heads * d, cfg.model_dim)?;
            let kv = (0..cfg.kv_heads)
                .map(|_| {
                    Ok(HeadModel {
                        key_basis: orthonormal_columns(&mut rng, d, d)?,
                        value_basis: orthonormal_columns(&mut rng, d, d)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let query_bases = (0..cfg.query_heads)
                .map(|i| {
                    let fresh = orthonormal_columns(&mut rng, d, d)?;
                    let mix = kv[i / m].key_basis.scale(rho).add(&fresh.scale(fresh_weight));
                    polar_factor(&mix)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(LayerModel { wo, kv, query_bases })
        })
        .collect()
}

fn draw_cache(
    rng: &mut ChaCha8Rng,
    cfg: &SynthConfig,
    scaled_spectrum: &[f64],
    basis: &Matrix,
    noise_scale: f64,
) -> Result<Matrix> {
    let r = scaled_spectrum.len();
    let u = orthonormal_columns(rng, cfg.tokens, r)?;
    let signal = u.scale_columns(scaled_spectrum).mul_t(&basis.columns(0..r));
    let noise = gaussian_matrix(rng, cfg.tokens, cfg.head_dim);
    Ok(signal
        .add(&noise.scale(noise_scale))
        .map(|x| cfg.dtype.round(x)))
}

/// Generates a bundle; a pure function of `cfg`.
pub fn gen_synthetic(cfg: &SynthConfig) -> Result<CacheBundle> {
    cfg.validate()?;
    let model = draw_model(cfg)?;
    let amplitude = cfg.resolved_amplitude();
    let spectrum: Vec<f64> = cfg.spectrum().iter().map(|s| s * amplitude).collect();
    let noise_scale = cfg.noise_level * amplitude / libm::sqrt(cfg.tokens as f64);

    let caches = (0..cfg.sequences)
        .map(|s| {
            let stream = 1 + (cfg.first_sequence + s) as u64;
            let mut rng = seeded_rng(cfg.seed, stream);
            model
                .iter()
                .map(|layer| {
                    let mut keys = Vec::with_capacity(cfg.kv_heads);
                    let mut values = Vec::with_capacity(cfg.kv_heads);
                    for head in &layer.kv {
                        keys.push(draw_cache(&mut rng, cfg, &spectrum, &head.key_basis, noise_scale)?);
                        values.push(draw_cache(&mut rng, cfg, &spectrum, &head.value_basis, noise_scale)?);
                    }
                    let queries = layer
                        .query_bases
                        .iter()
                        .map(|b| draw_cache(&mut rng, cfg, &spectrum, b, noise_scale))
                        .collect::<Result<Vec<_>>>()?;
                    Ok(LayerCaches { keys, values, queries })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let wo = model
        .iter()
        .map(|l| l.wo.map(|x| cfg.dtype.round(x)))
        .collect();
    CacheBundle::new(cfg.manifest(), caches, wo)
}
