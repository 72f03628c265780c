//! Gaussian decoder: spatio-temporal feature to canonical attribute deltas,
//! plus the per-gaussian spherical-harmonics colour store.

use nalgebra::{Quaternion, UnitQuaternion, Vector3, Vector4};
use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::hexplane::SpatioTemporalFeature;
use crate::math::sigmoid;
use crate::nn::{Mlp, MlpCache, MlpGradient};
use crate::{Error, Result};

/// Raw output width: offset (3), opacity (1), rotation (4), scale (3).
pub const RAW_DIM: usize = 11;
pub const MIN_SCALE: f64 = 1e-6;
const QUAT_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub depth: usize,
    pub width: usize,
    pub max_offset: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { depth: 2, width: 256, max_offset: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderNetwork {
    pub mlp: Mlp,
    /// Bound on `|delta_x|` per axis (`max_offset * tanh`).
    pub max_offset: f64,
    /// Upper clamp on decoded scales (the canonical bbox diagonal).
    pub max_scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodedGaussianDelta {
    pub delta_x: Vector3<f64>,
    pub opacity: f64,
    pub rotation: UnitQuaternion<f64>,
    pub scale: Vector3<f64>,
}

/// Upstream gradients on the four squashed heads. `rotation` is ordered
/// `(w, x, y, z)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct HeadGradient {
    pub delta_x: Vector3<f64>,
    pub opacity: f64,
    pub rotation: Vector4<f64>,
    pub scale: Vector3<f64>,
}

#[derive(Debug, Clone)]
pub struct DecoderGradient {
    pub weights: MlpGradient,
    /// One row per input feature.
    pub features: Array2<f64>,
    /// Gradient on the raw opacity logit (equal to the gradient on any
    /// additive opacity bias).
    pub opacity_logit: Vec<f64>,
}

/// Forward state for [`DecoderNetwork::backward`].
#[derive(Debug, Clone)]
pub struct DecoderCache {
    mlp: MlpCache,
    raw: Array2<f64>,
    opacity_bias: Vec<f64>,
}

impl DecoderNetwork {
    /// Random hidden layers and a small output layer whose biases put the
    /// initial decode at identity rotation, zero offset, opacity
    /// `init_opacity` and scale `init_scale`.
    pub fn init<R: Rng>(in_dim: usize, cfg: &DecoderConfig, init_scale: f64, init_opacity: f64, max_scale: f64, rng: &mut R) -> Self {
        let mut mlp = Mlp::init(in_dim, cfg.depth, cfg.width, RAW_DIM, 0.01, rng);
        let out = mlp.layers.last_mut().expect("output layer");
        out.bias[3] = crate::math::logit(init_opacity);
        out.bias[4] = 1.0;
        for k in 8..11 {
            out.bias[k] = init_scale.ln();
        }
        Self { mlp, max_offset: cfg.max_offset, max_scale }
    }

    pub fn zeros(in_dim: usize, cfg: &DecoderConfig, max_scale: f64) -> Self {
        Self { mlp: Mlp::zeros(in_dim, cfg.depth, cfg.width, RAW_DIM), max_offset: cfg.max_offset, max_scale }
    }

    pub fn in_dim(&self) -> usize {
        self.mlp.in_dim()
    }

    /// Squashes one raw output row; `opacity_bias` is added to the opacity
    /// logit before the sigmoid.
    pub fn squash(&self, raw: &[f64], opacity_bias: f64) -> DecodedGaussianDelta {
        let delta_x = Vector3::new(raw[0].tanh(), raw[1].tanh(), raw[2].tanh()) * self.max_offset;
        let opacity = sigmoid(raw[3] + opacity_bias).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON);
        let q = Quaternion::new(raw[4], raw[5], raw[6], raw[7]);
        let rotation = if q.norm() < QUAT_EPS { UnitQuaternion::identity() } else { UnitQuaternion::from_quaternion(q) };
        let scale = Vector3::new(raw[8].exp(), raw[9].exp(), raw[10].exp()).map(|s| s.clamp(MIN_SCALE, self.max_scale));
        DecodedGaussianDelta { delta_x, opacity, rotation, scale }
    }

    pub fn decode(&self, f: &SpatioTemporalFeature) -> Result<DecodedGaussianDelta> {
        let x = ArrayView2::from_shape((1, f.len()), &f.values).map_err(|e| Error::Config(e.to_string()))?;
        let raw = self.mlp.forward(x)?;
        Ok(self.squash(raw.row(0).as_slice().expect("contiguous"), 0.0))
    }

    pub fn decode_batch(&self, features: &[SpatioTemporalFeature]) -> Result<Vec<DecodedGaussianDelta>> {
        if features.is_empty() {
            return Ok(Vec::new());
        }
        let dim = features[0].len();
        if features.iter().any(|f| f.len() != dim) {
            return Err(Error::Config("feature batch has mixed dimensions".into()));
        }
        let x = Array2::from_shape_fn((features.len(), dim), |(r, c)| features[r].values[c]);
        let (out, _) = self.forward(x.view(), None)?;
        Ok(out)
    }

    /// Batched decode keeping the state needed by [`Self::backward`].
    /// `opacity_bias` holds one additive opacity logit per row.
    pub fn forward(&self, features: ArrayView2<f64>, opacity_bias: Option<&[f64]>) -> Result<(Vec<DecodedGaussianDelta>, DecoderCache)> {
        let (raw, mlp) = self.mlp.forward_cached(features)?;
        let bias = match opacity_bias {
            Some(b) if b.len() == raw.nrows() => b.to_vec(),
            Some(_) => return Err(Error::Config("opacity bias length differs from batch size".into())),
            None => vec![0.0; raw.nrows()],
        };
        let out = raw
            .rows()
            .into_iter()
            .zip(&bias)
            .map(|(r, &b)| self.squash(r.as_slice().expect("contiguous"), b))
            .collect();
        Ok((out, DecoderCache { mlp, raw, opacity_bias: bias }))
    }

    /// Gradient of the raw output row given head gradients.
    pub fn squash_backward(&self, raw: &[f64], opacity_bias: f64, g: &HeadGradient) -> [f64; RAW_DIM] {
        let mut out = [0.0; RAW_DIM];
        for k in 0..3 {
            let th = raw[k].tanh();
            out[k] = g.delta_x[k] * self.max_offset * (1.0 - th * th);
        }
        let s = sigmoid(raw[3] + opacity_bias);
        out[3] = g.opacity * s * (1.0 - s);
        let q = Vector4::new(raw[4], raw[5], raw[6], raw[7]);
        let n = q.norm();
        if n >= QUAT_EPS {
            let qh = q / n;
            let gq = (g.rotation - qh * qh.dot(&g.rotation)) / n;
            out[4..8].copy_from_slice(gq.as_slice());
        }
        for k in 0..3 {
            let e = raw[8 + k].exp();
            if (MIN_SCALE..=self.max_scale).contains(&e) {
                out[8 + k] = g.scale[k] * e;
            }
        }
        out
    }

    pub fn backward(&self, cache: &DecoderCache, heads: &[HeadGradient]) -> DecoderGradient {
        let n = cache.raw.nrows();
        let mut graw = Array2::zeros((n, RAW_DIM));
        let mut opacity_logit = vec![0.0; n];
        for (i, g) in heads.iter().enumerate() {
            let row = self.squash_backward(cache.raw.row(i).as_slice().expect("contiguous"), cache.opacity_bias[i], g);
            opacity_logit[i] = row[3];
            for (k, v) in row.iter().enumerate() {
                graw[[i, k]] = *v;
            }
        }
        let (weights, features) = self.mlp.backward(&cache.mlp, graw.view());
        DecoderGradient { weights, features, opacity_logit }
    }

    /// Gradients of `sum_heads <upstream, decode(f)>` for a single feature.
    pub fn decoder_gradient(&self, f: &SpatioTemporalFeature, upstream: &HeadGradient) -> Result<DecoderGradient> {
        let x = ArrayView2::from_shape((1, f.len()), &f.values).map_err(|e| Error::Config(e.to_string()))?;
        let (_, cache) = self.forward(x, None)?;
        Ok(self.backward(&cache, std::slice::from_ref(upstream)))
    }
}

/// Per-gaussian spherical-harmonics coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianColorStore {
    pub degree: usize,
    /// `count x (degree+1)^2 x 3`, channels fastest.
    pub coeffs: Vec<f64>,
}

impl GaussianColorStore {
    pub fn new(degree: usize, count: usize) -> Result<Self> {
        if degree > 3 {
            return Err(Error::Config(format!("spherical harmonics degree {degree} exceeds 3")));
        }
        Ok(Self { degree, coeffs: vec![0.0; count * Self::coeffs_for(degree)] })
    }

    /// Store whose DC terms reproduce the given RGB colours exactly.
    pub fn from_rgb(degree: usize, colors: &[[f64; 3]]) -> Result<Self> {
        let mut store = Self::new(degree, colors.len())?;
        for (i, c) in colors.iter().enumerate() {
            let block = store.block_mut(i);
            for ch in 0..3 {
                block[ch] = (c[ch] - 0.5) / crate::rasterizer::sh::SH_C0;
            }
        }
        Ok(store)
    }

    pub fn coeffs_for(degree: usize) -> usize {
        (degree + 1) * (degree + 1) * 3
    }

    pub fn per_gaussian(&self) -> usize {
        Self::coeffs_for(self.degree)
    }

    pub fn len(&self) -> usize {
        self.coeffs.len() / self.per_gaussian()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn block(&self, i: usize) -> &[f64] {
        let n = self.per_gaussian();
        &self.coeffs[i * n..(i + 1) * n]
    }

    pub fn block_mut(&mut self, i: usize) -> &mut [f64] {
        let n = self.per_gaussian();
        &mut self.coeffs[i * n..(i + 1) * n]
    }

    /// Keeps the gaussians whose `keep` flag is set, preserving order.
    pub fn retain(&mut self, keep: &[bool]) {
        let n = self.per_gaussian();
        let mut out = Vec::with_capacity(self.coeffs.len());
        for (i, &k) in keep.iter().enumerate() {
            if k {
                out.extend_from_slice(&self.coeffs[i * n..(i + 1) * n]);
            }
        }
        self.coeffs = out;
    }
}
