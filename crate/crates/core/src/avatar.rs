//! The canonical avatar: every learned component plus the full
//! encode, decode, warp and render chain with its reverse pass.

use nalgebra::{UnitQuaternion, Vector3};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoder::{DecodedGaussianDelta, DecoderCache, DecoderConfig, DecoderNetwork, GaussianColorStore, HeadGradient};
use crate::hexplane::{CodebookConfig, CodebookGradient, HexPlaneCodebook};
use crate::math::{quat_to_matrix_backward, Aabb, TimeRange};
use crate::nn::MlpGradient;
use crate::rasterizer::{render, render_backward, render_with_state, Camera, PosedGaussianSet, RenderGradients, RenderSettings, RenderState, RenderedImage};
use crate::skinning::{
    assign_gaussian_parts, forward_kinematics, sample_in_capsules, warp_backward, warp_to_observation, BlendCache, BlendFieldConfig,
    BlendWeightField, JointTransforms, Pose, PoseTrack, Skeleton, WarpedGeometry,
};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub gaussian_count: usize,
    /// Radius of the bone capsules used to sample initial positions.
    pub capsule_radius: f64,
    /// Margin added around the rest skeleton to form the canonical bbox.
    pub bbox_margin: f64,
    pub sh_degree: usize,
    pub init_scale: f64,
    pub init_opacity: f64,
    pub codebook: CodebookConfig,
    pub decoder: DecoderConfig,
    pub blend: BlendFieldConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            gaussian_count: 180,
            capsule_radius: 0.07,
            bbox_margin: 0.3,
            sh_degree: 0,
            init_scale: 0.04,
            init_opacity: 0.7,
            codebook: CodebookConfig::default(),
            decoder: DecoderConfig::default(),
            blend: BlendFieldConfig::default(),
        }
    }
}

/// Normalized codebook time(s) for one gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TimeQuery {
    At(f64),
    /// Mean of the features at two times.
    Mean(f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalAvatar {
    pub positions: Vec<Vector3<f64>>,
    pub colors: GaussianColorStore,
    /// Per-gaussian additive opacity logit.
    pub opacity_bias: Vec<f64>,
    pub codebook: HexPlaneCodebook,
    pub decoder: DecoderNetwork,
    pub blend: BlendWeightField,
    pub skeleton: Skeleton,
    pub bbox: Aabb,
    pub time_range: TimeRange,
    /// Poses the codebook was recorded against; the retrieval index source.
    pub training_track: PoseTrack,
}

/// Forward state of one frame.
#[derive(Debug, Clone)]
pub struct AvatarForward {
    pub set: PosedGaussianSet,
    pub warped: WarpedGeometry,
    /// `x_c + delta_x`.
    pub canonical: Vec<Vector3<f64>>,
    pub decoded: Vec<DecodedGaussianDelta>,
    pub weights: Array2<f64>,
    queries: Vec<TimeQuery>,
    decoder_cache: DecoderCache,
    blend_cache: BlendCache,
    jt: JointTransforms,
}

#[derive(Debug, Clone)]
pub struct AvatarGradient {
    pub decoder: MlpGradient,
    pub sh: Vec<f64>,
    pub positions: Vec<Vector3<f64>>,
    pub opacity_bias: Vec<f64>,
    pub blend_logits: Array2<f64>,
    pub blend_net: MlpGradient,
}

fn round_f32(v: &mut f64) {
    *v = *v as f32 as f64;
}

impl CanonicalAvatar {
    pub fn init(skeleton: Skeleton, training_track: PoseTrack, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        if cfg.gaussian_count == 0 {
            return Err(Error::Config("gaussian count must be positive".into()));
        }
        if training_track.is_empty() {
            return Err(Error::Config("training pose track is empty".into()));
        }
        if !(cfg.init_opacity > 0.0 && cfg.init_opacity < 1.0 && cfg.init_scale > 0.0) {
            return Err(Error::Config("initial opacity must be in (0,1) and initial scale positive".into()));
        }
        for r in &training_track.records {
            if r.pose.thetas.len() != skeleton.joint_count() {
                return Err(Error::JointCountMismatch { expected: skeleton.joint_count(), got: r.pose.thetas.len() });
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let positions: Vec<Vector3<f64>> = (0..cfg.gaussian_count).map(|_| sample_in_capsules(&skeleton, cfg.capsule_radius, &mut rng)).collect();
        let bbox = skeleton.rest_bounds().expanded(cfg.bbox_margin);
        let first = training_track.records[0].frame_index as f64;
        let last = training_track.records.last().expect("non-empty").frame_index as f64;
        let time_range = TimeRange::new(first, last);
        let codebook = HexPlaneCodebook::random(&cfg.codebook, bbox, time_range, &mut rng)?;
        let decoder = DecoderNetwork::init(codebook.feature_dim(), &cfg.decoder, cfg.init_scale, cfg.init_opacity, bbox.diagonal(), &mut rng);
        let blend = BlendWeightField::new(&skeleton, &positions, bbox, &cfg.blend, &mut rng);
        let mut avatar = Self {
            colors: GaussianColorStore::new(cfg.sh_degree, positions.len())?,
            opacity_bias: vec![0.0; positions.len()],
            positions,
            codebook,
            decoder,
            blend,
            skeleton,
            bbox,
            time_range,
            training_track,
        };
        avatar.quantize();
        avatar.validate()?;
        Ok(avatar)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.colors.len() != n || self.opacity_bias.len() != n || self.blend.len() != n {
            return Err(Error::Validation(format!(
                "per-gaussian counts differ: {n} positions, {} colours, {} opacity biases, {} blend rows",
                self.colors.len(),
                self.opacity_bias.len(),
                self.blend.len()
            )));
        }
        if self.blend.joint_count() != self.skeleton.joint_count() {
            return Err(Error::JointCountMismatch { expected: self.skeleton.joint_count(), got: self.blend.joint_count() });
        }
        if self.decoder.in_dim() != self.codebook.feature_dim() {
            return Err(Error::Validation("decoder input width differs from feature width".into()));
        }
        if let Some(p) = self.positions.iter().find(|p| !self.bbox.contains(p)) {
            return Err(Error::Validation(format!("position ({}, {}, {}) outside the canonical bbox", p.x, p.y, p.z)));
        }
        Ok(())
    }

    /// Rounds every stored parameter through `f32`, the archive precision.
    pub fn quantize(&mut self) {
        self.positions.iter_mut().for_each(|p| p.iter_mut().for_each(round_f32));
        self.colors.coeffs.iter_mut().for_each(round_f32);
        self.opacity_bias.iter_mut().for_each(round_f32);
        self.codebook.entries_mut().for_each(round_f32);
        self.decoder.mlp.parameters_mut().for_each(round_f32);
        self.blend.base_logits.iter_mut().for_each(round_f32);
        self.blend.net.parameters_mut().for_each(round_f32);
    }

    /// Keeps the gaussians flagged in `keep`, compacting every per-gaussian array.
    pub fn retain(&mut self, keep: &[bool]) {
        let mut it = keep.iter();
        self.positions.retain(|_| *it.next().expect("mask length"));
        let mut it = keep.iter();
        self.opacity_bias.retain(|_| *it.next().expect("mask length"));
        self.colors.retain(keep);
        self.blend.retain(keep);
    }

    pub fn normalized_time(&self, frame: f64) -> f64 {
        self.time_range.normalize(frame)
    }

    pub fn blend_weights(&self) -> Result<Array2<f64>> {
        Ok(self.blend.forward(&self.positions)?.0)
    }

    /// Features of every gaussian (`N x F`).
    pub fn features(&self, queries: &[TimeQuery]) -> Result<Array2<f64>> {
        if queries.len() != self.len() {
            return Err(Error::Config(format!("{} time queries for {} gaussians", queries.len(), self.len())));
        }
        let dim = self.codebook.feature_dim();
        let mut features = Array2::zeros((self.len(), dim));
        features
            .as_slice_mut()
            .expect("standard layout")
            .par_chunks_mut(dim)
            .zip(self.positions.par_iter().zip(queries.par_iter()))
            .try_for_each(|(out, (x, q))| -> Result<()> {
                match *q {
                    TimeQuery::At(t) => self.codebook.encode_into(x, t, out),
                    TimeQuery::Mean(a, b) => {
                        let f = self.codebook.encode_smoothed(x, a, b)?;
                        out.copy_from_slice(&f.values);
                        Ok(())
                    }
                }
            })?;
        Ok(features)
    }

    /// Decoded attributes of every gaussian at one normalized time.
    pub fn decode_at(&self, t: f64) -> Result<Vec<DecodedGaussianDelta>> {
        let features = self.features(&vec![TimeQuery::At(t); self.len()])?;
        Ok(self.decoder.forward(features.view(), Some(&self.opacity_bias))?.0)
    }

    pub fn forward(&self, queries: &[TimeQuery], pose: &Pose) -> Result<AvatarForward> {
        let features = self.features(queries)?;
        let (decoded, decoder_cache) = self.decoder.forward(features.view(), Some(&self.opacity_bias))?;
        let canonical: Vec<Vector3<f64>> = self.positions.iter().zip(&decoded).map(|(x, d)| x + d.delta_x).collect();
        let rotations: Vec<UnitQuaternion<f64>> = decoded.iter().map(|d| d.rotation).collect();
        let (weights, blend_cache) = self.blend.forward(&self.positions)?;
        let jt = forward_kinematics(&self.skeleton, pose)?;
        let warped = warp_to_observation(&canonical, &rotations, weights.view(), &jt)?;
        let set = PosedGaussianSet {
            positions: warped.positions.clone(),
            rotations: warped.rotations.clone(),
            scales: decoded.iter().map(|d| d.scale).collect(),
            opacities: decoded.iter().zip(&warped.degenerate).map(|(d, &bad)| if bad { 0.0 } else { d.opacity }).collect(),
            colors: self.colors.clone(),
            parts: assign_gaussian_parts(weights.view(), &self.skeleton),
        };
        Ok(AvatarForward { set, warped, canonical, decoded, weights, queries: queries.to_vec(), decoder_cache, blend_cache, jt })
    }

    /// Posed gaussians at one normalized time.
    pub fn pose_at(&self, t: f64, pose: &Pose) -> Result<PosedGaussianSet> {
        Ok(self.forward(&vec![TimeQuery::At(t); self.len()], pose)?.set)
    }

    pub fn render_queries(&self, queries: &[TimeQuery], pose: &Pose, cam: &Camera, settings: &RenderSettings) -> Result<RenderedImage> {
        render(&self.forward(queries, pose)?.set, cam, settings)
    }

    /// Recorded appearance at training frame `frame` under `pose`.
    pub fn render_frame(&self, frame: f64, pose: &Pose, cam: &Camera, settings: &RenderSettings) -> Result<RenderedImage> {
        if !self.time_range.contains(frame) {
            return Err(Error::Usage(format!(
                "frame {frame} outside the trained range [{}, {}]",
                self.time_range.first_frame, self.time_range.last_frame
            )));
        }
        let t = self.normalized_time(frame);
        self.render_queries(&vec![TimeQuery::At(t); self.len()], pose, cam, settings)
    }

    pub fn render_with_state(&self, fwd: &AvatarForward, cam: &Camera, settings: &RenderSettings) -> Result<(RenderedImage, RenderState)> {
        render_with_state(&fwd.set, cam, settings)
    }

    /// Reverse pass from image gradients. Codebook gradients are accumulated
    /// into `codebook_grad`.
    pub fn backward(
        &self,
        fwd: &AvatarForward,
        cam: &Camera,
        settings: &RenderSettings,
        state: &RenderState,
        upstream: &[f64],
        codebook_grad: &mut CodebookGradient,
    ) -> Result<AvatarGradient> {
        let rg: RenderGradients = render_backward(&fwd.set, cam, settings, state, upstream)?;
        let rotations: Vec<UnitQuaternion<f64>> = fwd.decoded.iter().map(|d| d.rotation).collect();
        let wg = warp_backward(&fwd.canonical, &rotations, fwd.weights.view(), &fwd.jt, &rg.positions, &rg.rotation_matrices)?;
        let heads: Vec<HeadGradient> = (0..self.len())
            .map(|i| {
                let q = fwd.decoded[i].rotation;
                let g = quat_to_matrix_backward(q.quaternion(), &wg.rotation_matrices[i]);
                HeadGradient {
                    delta_x: wg.positions[i],
                    opacity: if fwd.warped.degenerate[i] { 0.0 } else { rg.opacities[i] },
                    rotation: nalgebra::Vector4::new(g[0], g[1], g[2], g[3]),
                    scale: rg.scales[i],
                }
            })
            .collect();
        let dg = self.decoder.backward(&fwd.decoder_cache, &heads);
        let bg = self.blend.backward(&fwd.blend_cache, wg.weights.view());
        let mut positions: Vec<Vector3<f64>> = (0..self.len()).map(|i| wg.positions[i] + bg.positions[i]).collect();
        for (i, q) in fwd.queries.iter().enumerate() {
            let up = dg.features.row(i);
            let up = up.as_slice().expect("contiguous");
            let x = &self.positions[i];
            match *q {
                TimeQuery::At(t) => positions[i] += codebook_grad.accumulate(&self.codebook, x, t, up)?.0,
                TimeQuery::Mean(a, b) => {
                    let half: Vec<f64> = up.iter().map(|v| 0.5 * v).collect();
                    positions[i] += codebook_grad.accumulate(&self.codebook, x, a, &half)?.0;
                    positions[i] += codebook_grad.accumulate(&self.codebook, x, b, &half)?.0;
                }
            }
        }
        Ok(AvatarGradient {
            decoder: dg.weights,
            sh: rg.sh,
            positions,
            opacity_bias: dg.opacity_logit,
            blend_logits: bg.base_logits,
            blend_net: bg.net,
        })
    }
}
