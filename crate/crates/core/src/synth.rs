//! Deterministic synthetic articulated scenes with ground truth.
//!
//! A biped made of gaussians is posed by periodic sinusoidal joint tracks and
//! skinned with fixed inverse-distance weights. A small cluster of gaussians
//! (the appendage) is displaced by an offset that depends on the frame
//! number only, with twice the pose period, so frames `f` and `f + period`
//! share a pose but not an appearance.

use std::f64::consts::PI;

use nalgebra::{UnitQuaternion, Vector3};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, GroundTruthTrack, GtFrame, GtGaussian, SplitManifest};
use crate::decoder::GaussianColorStore;
use crate::rasterizer::image_io::quantize;
use crate::rasterizer::{render, Camera, PosedGaussianSet, RenderSettings};
use crate::skinning::{
    forward_kinematics, inverse_distance_weights, sample_in_capsules, warp_to_observation, BodyPart, Joint, Pose, PoseTrack, Skeleton,
};
use crate::{Error, Result};

/// Nine joints covering all five parts.
pub fn biped() -> Skeleton {
    let j = |name: &str, parent: Option<usize>, p: [f64; 3], part| Joint { name: name.into(), parent, rest_position: p, part };
    Skeleton::new(vec![
        j("pelvis", None, [0.0, 0.0, 0.0], BodyPart::Cb),
        j("l_shoulder", Some(0), [0.25, 0.55, 0.0], BodyPart::La),
        j("l_hand", Some(1), [0.7, 0.55, 0.0], BodyPart::La),
        j("r_shoulder", Some(0), [-0.25, 0.55, 0.0], BodyPart::Ra),
        j("r_hand", Some(3), [-0.7, 0.55, 0.0], BodyPart::Ra),
        j("l_hip", Some(0), [0.15, -0.1, 0.0], BodyPart::Ll),
        j("l_foot", Some(5), [0.15, -0.85, 0.0], BodyPart::Ll),
        j("r_hip", Some(0), [-0.15, -0.1, 0.0], BodyPart::Rl),
        j("r_foot", Some(7), [-0.15, -0.85, 0.0], BodyPart::Rl),
    ])
    .expect("valid biped")
}

/// `theta_j(f) = amplitude * sin(2 pi ((f + shift) mod period) / period + phase(part)) * axis`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointTrack {
    pub joint: usize,
    pub axis: [f64; 3],
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MotionProgram {
    pub period: usize,
    pub tracks: Vec<JointTrack>,
    /// Phase offset per part, in `BodyPart::ALL` order (cb, ll, la, rl, ra).
    pub part_phases: [f64; 5],
    /// Vertical root bob amplitude.
    pub root_bob: f64,
    /// Frames at or after this index are sampled half a frame later, so
    /// their poses never coincide with earlier frames.
    pub shift_from: usize,
    pub shift: f64,
}

impl Default for MotionProgram {
    fn default() -> Self {
        let t = |joint, axis: [f64; 3], amplitude| JointTrack { joint, axis, amplitude };
        Self {
            period: 10,
            tracks: vec![
                t(0, [0.0, 1.0, 0.0], 0.25),
                t(1, [0.0, 0.0, 1.0], 0.6),
                t(2, [0.0, 0.0, 1.0], 0.2),
                t(3, [0.0, 0.0, 1.0], 0.6),
                t(4, [0.0, 0.0, 1.0], 0.2),
                t(5, [1.0, 0.0, 0.0], 0.5),
                t(6, [1.0, 0.0, 0.0], 0.2),
                t(7, [1.0, 0.0, 0.0], 0.5),
                t(8, [1.0, 0.0, 0.0], 0.2),
            ],
            part_phases: [0.0, PI, 0.0, 0.0, PI],
            root_bob: 0.03,
            shift_from: 20,
            shift: 0.5,
        }
    }
}

impl MotionProgram {
    fn phase_arg(&self, frame: usize) -> f64 {
        let p = self.period as f64;
        let shifted = if frame >= self.shift_from { (frame % self.period) as f64 + self.shift } else { (frame % self.period) as f64 };
        2.0 * PI * (shifted % p) / p
    }

    pub fn pose(&self, skel: &Skeleton, frame: usize) -> Pose {
        let arg = self.phase_arg(frame);
        let mut pose = Pose::rest(skel.joint_count());
        for tr in &self.tracks {
            if tr.joint >= skel.joint_count() {
                continue;
            }
            let part = skel.part(tr.joint);
            let phase = self.part_phases[BodyPart::ALL.iter().position(|&p| p == part).expect("known part")];
            pose.thetas[tr.joint] += Vector3::from(tr.axis) * (tr.amplitude * (arg + phase).sin());
        }
        pose.root_translation = Vector3::new(0.0, self.root_bob * (2.0 * arg).sin(), 0.0);
        pose
    }
}

/// Cluster of gaussians in front of the pelvis swinging with
/// `amplitude * sin(2 pi f / period) * direction`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Appendage {
    pub count: usize,
    pub center: [f64; 3],
    pub half_extent: [f64; 2],
    pub amplitude: f64,
    pub period: f64,
    pub direction: [f64; 3],
    pub color: [f64; 3],
    pub scale: f64,
}

impl Default for Appendage {
    fn default() -> Self {
        Self {
            count: 16,
            center: [0.0, -0.12, 0.06],
            half_extent: [0.1, 0.08],
            amplitude: 0.05,
            period: 20.0,
            direction: [1.0, 0.0, 0.0],
            color: [0.95, 0.85, 0.1],
            scale: 0.035,
        }
    }
}

impl Appendage {
    pub fn offset(&self, frame: usize) -> Vector3<f64> {
        Vector3::from(self.direction) * (self.amplitude * (2.0 * PI * frame as f64 / self.period).sin())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraRing {
    pub count: usize,
    pub radius: f64,
    pub elevation: f64,
    pub target: [f64; 3],
    pub focal: f64,
    pub width: usize,
    pub height: usize,
}

impl Default for CameraRing {
    fn default() -> Self {
        Self { count: 8, radius: 3.0, elevation: 0.4, target: [0.0, -0.15, 0.0], focal: 90.0, width: 64, height: 64 }
    }
}

impl CameraRing {
    pub fn cameras(&self) -> Vec<Camera> {
        let target = Vector3::from(self.target);
        (0..self.count)
            .map(|v| {
                let a = 2.0 * PI * v as f64 / self.count as f64;
                let eye = target + Vector3::new(self.radius * a.sin(), self.elevation, self.radius * a.cos());
                Camera::look_at(eye, target, Vector3::y(), self.focal, self.width, self.height)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSceneSpec {
    pub skeleton: Skeleton,
    pub motion: MotionProgram,
    pub appendage: Appendage,
    pub cameras: CameraRing,
    pub frame_count: usize,
    pub body_gaussians: usize,
    pub body_radius: f64,
    pub body_scale: f64,
    pub opacity: f64,
    pub seed: u64,
    pub split: SplitManifest,
}

impl Default for SynthSceneSpec {
    fn default() -> Self {
        Self {
            skeleton: biped(),
            motion: MotionProgram::default(),
            appendage: Appendage::default(),
            cameras: CameraRing::default(),
            frame_count: 30,
            body_gaussians: 140,
            body_radius: 0.07,
            body_scale: 0.045,
            opacity: 0.9,
            seed: 7,
            split: SplitManifest::default(),
        }
    }
}

impl SynthSceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frame_count < 10 {
            return Err(Error::Config("synthetic scenes need at least 10 frames".into()));
        }
        if self.cameras.count < 4 {
            return Err(Error::Config("synthetic scenes need at least 4 cameras".into()));
        }
        if self.motion.period == 0 || !(self.appendage.period > 0.0) {
            return Err(Error::Config("motion periods must be positive".into()));
        }
        if self.body_gaussians == 0 || !(self.body_radius > 0.0 && self.body_scale > 0.0) {
            return Err(Error::Config("body gaussians need a positive count, radius and scale".into()));
        }
        if !(self.opacity > 0.0 && self.opacity <= 1.0) {
            return Err(Error::Config("opacity must be in (0,1]".into()));
        }
        if self.cameras.width == 0 || self.cameras.height == 0 || !(self.cameras.focal > 0.0) {
            return Err(Error::Config("camera ring needs a positive image size and focal length".into()));
        }
        Ok(())
    }

    pub fn pose_track(&self) -> PoseTrack {
        PoseTrack::from_poses(0, (0..self.frame_count).map(|f| self.motion.pose(&self.skeleton, f)).collect())
    }
}

fn part_color(part: BodyPart) -> [f64; 3] {
    match part {
        BodyPart::Cb => [0.85, 0.3, 0.25],
        BodyPart::La => [0.25, 0.45, 0.9],
        BodyPart::Ra => [0.2, 0.75, 0.35],
        BodyPart::Ll => [0.6, 0.3, 0.75],
        BodyPart::Rl => [0.9, 0.55, 0.2],
    }
}

fn canonical_gaussians(spec: &SynthSceneSpec) -> Vec<GtGaussian> {
    let skel = &spec.skeleton;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::new();
    for _ in 0..spec.body_gaussians {
        let p = sample_in_capsules(skel, spec.body_radius, &mut rng);
        let weights = inverse_distance_weights(skel, &p, 2.0);
        let dominant = (0..weights.len()).fold(0, |b, j| if weights[j] > weights[b] { j } else { b });
        let base = part_color(skel.part(dominant));
        let shade = 0.8 + 0.2 * (p.y * 6.0).sin().abs();
        let jitter: f64 = rng.gen_range(-0.05..0.05);
        let color = base.map(|c| (c * shade + jitter).clamp(0.0, 1.0));
        let scale = Vector3::new(rng.gen_range(0.8..1.2), rng.gen_range(0.8..1.2), rng.gen_range(0.8..1.2)) * spec.body_scale;
        out.push(GtGaussian { position: p, rotation: UnitQuaternion::identity(), scale, opacity: spec.opacity, color, appendage: false, weights });
    }
    let a = &spec.appendage;
    let side = (a.count as f64).sqrt().ceil().max(1.0) as usize;
    for i in 0..a.count {
        let (cx, cy) = ((i % side) as f64, (i / side) as f64);
        let denom = (side.max(2) - 1) as f64;
        let p = Vector3::new(a.center[0] + a.half_extent[0] * (2.0 * cx / denom - 1.0), a.center[1] + a.half_extent[1] * (2.0 * cy / denom - 1.0), a.center[2]);
        let mut weights = vec![0.0; skel.joint_count()];
        weights[skel.root()] = 1.0;
        out.push(GtGaussian {
            position: p,
            rotation: UnitQuaternion::identity(),
            scale: Vector3::repeat(a.scale),
            opacity: spec.opacity,
            color: a.color,
            appendage: true,
            weights,
        });
    }
    out
}

fn pose_frame(spec: &SynthSceneSpec, gaussians: &[GtGaussian], frame: usize, pose: &Pose) -> Result<GtFrame> {
    let off = spec.appendage.offset(frame);
    let offsets: Vec<Vector3<f64>> = gaussians.iter().map(|g| if g.appendage { off } else { Vector3::zeros() }).collect();
    let positions: Vec<Vector3<f64>> = gaussians.iter().zip(&offsets).map(|(g, o)| g.position + o).collect();
    let rotations: Vec<UnitQuaternion<f64>> = gaussians.iter().map(|g| g.rotation).collect();
    let k = spec.skeleton.joint_count();
    let weights = Array2::from_shape_fn((gaussians.len(), k), |(i, j)| gaussians[i].weights[j]);
    let jt = forward_kinematics(&spec.skeleton, pose)?;
    let warped = warp_to_observation(&positions, &rotations, weights.view(), &jt)?;
    Ok(GtFrame { frame, offsets, posed_positions: warped.positions, posed_rotations: warped.rotations })
}

fn posed_set(gaussians: &[GtGaussian], f: &GtFrame) -> Result<PosedGaussianSet> {
    let colors: Vec<[f64; 3]> = gaussians.iter().map(|g| g.color).collect();
    Ok(PosedGaussianSet {
        positions: f.posed_positions.clone(),
        rotations: f.posed_rotations.clone(),
        scales: gaussians.iter().map(|g| g.scale).collect(),
        opacities: gaussians.iter().map(|g| g.opacity).collect(),
        colors: GaussianColorStore::from_rgb(0, &colors)?,
        parts: Vec::new(),
    })
}

/// Renders every (view, frame) image, quantized to 8 bits as stored on disk.
pub fn generate(spec: &SynthSceneSpec) -> Result<Dataset> {
    spec.validate()?;
    let gaussians = canonical_gaussians(spec);
    let poses = spec.pose_track();
    let cameras = spec.cameras.cameras();
    let settings = RenderSettings::default();
    let frames: Vec<GtFrame> = poses.records.par_iter().map(|r| pose_frame(spec, &gaussians, r.frame_index, &r.pose)).collect::<Result<_>>()?;
    let sets: Vec<PosedGaussianSet> = frames.iter().map(|f| posed_set(&gaussians, f)).collect::<Result<_>>()?;
    let images: Vec<Vec<Vec<f64>>> = cameras
        .par_iter()
        .map(|cam| sets.iter().map(|set| Ok(quantize(&render(set, cam, &settings)?.rgb))).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;
    Ok(Dataset {
        skeleton: spec.skeleton.clone(),
        cameras,
        poses,
        images,
        split: spec.split.clone(),
        ground_truth: Some(GroundTruthTrack { gaussians, frames }),
    })
}

/// Ground-truth render of an arbitrary frame index and pose.
pub fn render_ground_truth(spec: &SynthSceneSpec, frame: usize, pose: &Pose, cam: &Camera) -> Result<Vec<f64>> {
    let gaussians = canonical_gaussians(spec);
    let f = pose_frame(spec, &gaussians, frame, pose)?;
    Ok(quantize(&render(&posed_set(&gaussians, &f)?, cam, &RenderSettings::default())?.rgb))
}
