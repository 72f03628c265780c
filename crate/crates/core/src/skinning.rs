//! Skeleton, forward kinematics and linear blend skinning.
//!
//! Joint rotations are axis-angle (Rodrigues). `T_k` maps rest-pose space to
//! posed space for joint `k`; a gaussian is warped by the weight-blended
//! `T = sum_k w_k T_k`. Because `T` is generally not rigid, the gaussian's
//! rotation is re-orthonormalized with the polar factor.

use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Rotation3, UnitQuaternion, Vector3};
use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::math::{matrix_to_quat, quat_to_matrix, softmax, Aabb, PolarFactor};
use crate::nn::{Mlp, MlpCache, MlpGradient};
use crate::{Error, Result};

/// Body partition used for retrieval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BodyPart {
    /// Center body (torso, pelvis, head, global root orientation).
    Cb,
    Ll,
    La,
    Rl,
    Ra,
}

impl BodyPart {
    pub const ALL: [BodyPart; 5] = [BodyPart::Cb, BodyPart::Ll, BodyPart::La, BodyPart::Rl, BodyPart::Ra];

    pub fn as_str(self) -> &'static str {
        match self {
            BodyPart::Cb => "cb",
            BodyPart::Ll => "ll",
            BodyPart::La => "la",
            BodyPart::Rl => "rl",
            BodyPart::Ra => "ra",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.as_str() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Joint {
    pub name: String,
    pub parent: Option<usize>,
    pub rest_position: [f64; 3],
    pub part: BodyPart,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SkeletonFile", into = "SkeletonFile")]
pub struct Skeleton {
    joints: Vec<Joint>,
    /// Parents before children.
    order: Vec<usize>,
    root: usize,
}

#[derive(Serialize, Deserialize)]
struct SkeletonFile {
    joints: Vec<Joint>,
}

impl TryFrom<SkeletonFile> for Skeleton {
    type Error = Error;
    fn try_from(f: SkeletonFile) -> Result<Self> {
        Skeleton::new(f.joints)
    }
}

impl From<Skeleton> for SkeletonFile {
    fn from(s: Skeleton) -> Self {
        SkeletonFile { joints: s.joints }
    }
}

/// A rest-pose bone segment; it moves with its `owner` (the parent joint).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoneSegment {
    pub owner: usize,
    pub start: Vector3<f64>,
    pub end: Vector3<f64>,
}

impl BoneSegment {
    pub fn distance(&self, p: &Vector3<f64>) -> f64 {
        let d = self.end - self.start;
        let len2 = d.norm_squared();
        let t = if len2 > 0.0 { ((p - self.start).dot(&d) / len2).clamp(0.0, 1.0) } else { 0.0 };
        (p - (self.start + d * t)).norm()
    }

    pub fn length(&self) -> f64 {
        (self.end - self.start).norm()
    }
}

impl Skeleton {
    /// Validates a single-rooted acyclic hierarchy with finite rest positions.
    pub fn new(joints: Vec<Joint>) -> Result<Self> {
        let k = joints.len();
        if k == 0 {
            return Err(Error::Validation("skeleton has no joints".into()));
        }
        let roots: Vec<usize> = (0..k).filter(|&i| joints[i].parent.is_none()).collect();
        if roots.len() != 1 {
            return Err(Error::Validation(format!("skeleton must have exactly one root, found {}", roots.len())));
        }
        for (i, j) in joints.iter().enumerate() {
            if let Some(p) = j.parent {
                if p >= k || p == i {
                    return Err(Error::Validation(format!("joint {i} has invalid parent {p}")));
                }
            }
            if !j.rest_position.iter().all(|v| v.is_finite()) {
                return Err(Error::Validation(format!("joint {i} has a non-finite rest position")));
            }
        }
        let mut children = vec![Vec::new(); k];
        for (i, j) in joints.iter().enumerate() {
            if let Some(p) = j.parent {
                children[p].push(i);
            }
        }
        let mut order = Vec::with_capacity(k);
        let mut stack = vec![roots[0]];
        while let Some(j) = stack.pop() {
            order.push(j);
            stack.extend(children[j].iter().rev());
        }
        if order.len() != k {
            return Err(Error::Validation("skeleton hierarchy contains a cycle".into()));
        }
        Ok(Self { joints, order, root: roots[0] })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn joints(&self) -> &[Joint] {
        &self.joints
    }

    pub fn joint_count(&self) -> usize {
        self.joints.len()
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn topological_order(&self) -> &[usize] {
        &self.order
    }

    pub fn rest_position(&self, k: usize) -> Vector3<f64> {
        Vector3::from(self.joints[k].rest_position)
    }

    pub fn part(&self, k: usize) -> BodyPart {
        self.joints[k].part
    }

    /// Joint indices of one body part, ascending.
    pub fn part_joints(&self, part: BodyPart) -> Vec<usize> {
        (0..self.joints.len()).filter(|&k| self.joints[k].part == part).collect()
    }

    /// Parts that own at least one joint, in [`BodyPart::ALL`] order.
    pub fn parts(&self) -> Vec<BodyPart> {
        BodyPart::ALL.into_iter().filter(|&p| self.joints.iter().any(|j| j.part == p)).collect()
    }

    pub fn bone_segments(&self) -> Vec<BoneSegment> {
        self.joints
            .iter()
            .enumerate()
            .filter_map(|(i, j)| j.parent.map(|p| BoneSegment { owner: p, start: self.rest_position(p), end: self.rest_position(i) }))
            .collect()
    }

    /// Rest-joint bounding box.
    pub fn rest_bounds(&self) -> Aabb {
        let pts: Vec<Vector3<f64>> = (0..self.joint_count()).map(|k| self.rest_position(k)).collect();
        Aabb::from_points(&pts).expect("non-empty skeleton")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    /// Local axis-angle rotation per joint, radians.
    pub thetas: Vec<Vector3<f64>>,
    pub root_translation: Vector3<f64>,
}

impl Pose {
    pub fn rest(joint_count: usize) -> Self {
        Self { thetas: vec![Vector3::zeros(); joint_count], root_translation: Vector3::zeros() }
    }

    pub fn is_finite(&self) -> bool {
        self.thetas.iter().all(|t| t.iter().all(|v| v.is_finite())) && self.root_translation.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseRecord {
    pub frame_index: usize,
    pub pose: Pose,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PoseTrack {
    pub records: Vec<PoseRecord>,
}

impl PoseTrack {
    pub fn from_poses(start_frame: usize, poses: Vec<Pose>) -> Self {
        Self { records: poses.into_iter().enumerate().map(|(i, pose)| PoseRecord { frame_index: start_frame + i, pose }).collect() }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn poses(&self) -> impl Iterator<Item = &Pose> {
        self.records.iter().map(|r| &r.pose)
    }

    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        Self { records: self.records[range].to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointTransforms {
    /// World rotation `R_k`.
    pub rotations: Vec<Matrix3<f64>>,
    /// Posed joint position `t_k`.
    pub translations: Vec<Vector3<f64>>,
    /// Rest-to-posed skinning matrix `T_k`.
    pub skinning: Vec<Matrix4<f64>>,
}

impl JointTransforms {
    pub fn identity(k: usize) -> Self {
        Self { rotations: vec![Matrix3::identity(); k], translations: vec![Vector3::zeros(); k], skinning: vec![Matrix4::identity(); k] }
    }
}

pub fn forward_kinematics(skel: &Skeleton, pose: &Pose) -> Result<JointTransforms> {
    let k = skel.joint_count();
    if pose.thetas.len() != k {
        return Err(Error::JointCountMismatch { expected: k, got: pose.thetas.len() });
    }
    if !pose.is_finite() {
        return Err(Error::Domain("pose contains non-finite values".into()));
    }
    let mut rotations = vec![Matrix3::identity(); k];
    let mut translations = vec![Vector3::zeros(); k];
    for &j in skel.topological_order() {
        let local = *Rotation3::from_scaled_axis(pose.thetas[j]).matrix();
        let rest = skel.rest_position(j);
        match skel.joints()[j].parent {
            None => {
                rotations[j] = local;
                translations[j] = rest + pose.root_translation;
            }
            Some(p) => {
                rotations[j] = rotations[p] * local;
                translations[j] = translations[p] + rotations[p] * (rest - skel.rest_position(p));
            }
        }
    }
    let skinning = (0..k)
        .map(|j| {
            let mut m = Matrix4::identity();
            m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rotations[j]);
            let t = translations[j] - rotations[j] * skel.rest_position(j);
            m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
            m
        })
        .collect();
    Ok(JointTransforms { rotations, translations, skinning })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlendFieldConfig {
    pub depth: usize,
    pub width: usize,
    /// Exponent of the inverse-distance initialization.
    pub idw_power: f64,
}

impl Default for BlendFieldConfig {
    fn default() -> Self {
        Self { depth: 4, width: 128, idw_power: 2.0 }
    }
}

/// Per-gaussian base logits plus a residual logit field over canonical space.
#[derive(Debug, Clone, PartialEq)]
pub struct BlendWeightField {
    /// `N x K`.
    pub base_logits: Array2<f64>,
    /// Maps bbox-normalized position (in `[-1,1]^3`) to `K` residual logits.
    pub net: Mlp,
    pub bbox: Aabb,
}

#[derive(Debug, Clone)]
pub struct BlendCache {
    net: MlpCache,
    weights: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct BlendGradient {
    pub base_logits: Array2<f64>,
    pub net: MlpGradient,
    pub positions: Vec<Vector3<f64>>,
}

const MIN_INIT_WEIGHT: f64 = 1e-6;

/// Inverse-distance weights to the nearest four bone segments, accumulated
/// onto the segments' owner joints.
pub fn inverse_distance_weights(skel: &Skeleton, p: &Vector3<f64>, power: f64) -> Vec<f64> {
    let segments = skel.bone_segments();
    let mut w = vec![0.0; skel.joint_count()];
    if segments.is_empty() {
        w[skel.root()] = 1.0;
        return w;
    }
    let mut d: Vec<(f64, usize)> = segments.iter().map(|s| (s.distance(p), s.owner)).collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0));
    for &(dist, owner) in d.iter().take(4) {
        w[owner] += 1.0 / (dist + 1e-4).powf(power);
    }
    let sum: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= sum);
    w
}

impl BlendWeightField {
    pub fn new<R: Rng>(skel: &Skeleton, positions: &[Vector3<f64>], bbox: Aabb, cfg: &BlendFieldConfig, rng: &mut R) -> Self {
        let k = skel.joint_count();
        let mut base_logits = Array2::zeros((positions.len(), k));
        for (i, p) in positions.iter().enumerate() {
            for (j, w) in inverse_distance_weights(skel, p, cfg.idw_power).into_iter().enumerate() {
                base_logits[[i, j]] = w.max(MIN_INIT_WEIGHT).ln();
            }
        }
        let net = Mlp::init(3, cfg.depth, cfg.width, k, 0.0, rng);
        Self { base_logits, net, bbox }
    }

    pub fn joint_count(&self) -> usize {
        self.base_logits.ncols()
    }

    pub fn len(&self) -> usize {
        self.base_logits.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn net_input(&self, x: &Vector3<f64>) -> [f64; 3] {
        let u = self.bbox.normalize(x);
        [2.0 * u.x - 1.0, 2.0 * u.y - 1.0, 2.0 * u.z - 1.0]
    }

    pub fn blend_weights(&self, x: &Vector3<f64>, index: usize) -> Result<Vec<f64>> {
        if index >= self.len() {
            return Err(Error::Index(format!("gaussian {index} out of range ({})", self.len())));
        }
        let input = self.net_input(x);
        let res = self.net.forward(ArrayView2::from_shape((1, 3), &input).expect("shape"))?;
        let logits: Vec<f64> = (0..self.joint_count()).map(|j| self.base_logits[[index, j]] + res[[0, j]]).collect();
        Ok(softmax(&logits))
    }

    /// Weights for every gaussian (`N x K`), with the reverse-pass state.
    pub fn forward(&self, positions: &[Vector3<f64>]) -> Result<(Array2<f64>, BlendCache)> {
        if positions.len() != self.len() {
            return Err(Error::Config(format!("{} positions for {} blend rows", positions.len(), self.len())));
        }
        let input = Array2::from_shape_fn((positions.len(), 3), |(r, c)| self.net_input(&positions[r])[c]);
        let (res, net) = self.net.forward_cached(input.view())?;
        let mut weights = &self.base_logits + &res;
        for mut row in weights.rows_mut() {
            let w = softmax(row.as_slice().expect("contiguous"));
            row.iter_mut().zip(w).for_each(|(d, s)| *d = s);
        }
        Ok((weights.clone(), BlendCache { net, weights }))
    }

    pub fn backward(&self, cache: &BlendCache, grad_weights: ArrayView2<f64>) -> BlendGradient {
        let w = &cache.weights;
        let mut dz = Array2::zeros(w.raw_dim());
        for i in 0..w.nrows() {
            let dot: f64 = (0..w.ncols()).map(|j| w[[i, j]] * grad_weights[[i, j]]).sum();
            for j in 0..w.ncols() {
                dz[[i, j]] = w[[i, j]] * (grad_weights[[i, j]] - dot);
            }
        }
        let (net, dinput) = self.net.backward(&cache.net, dz.view());
        let e = self.bbox.extent();
        let positions = dinput.rows().into_iter().map(|r| Vector3::new(2.0 * r[0] / e.x, 2.0 * r[1] / e.y, 2.0 * r[2] / e.z)).collect();
        BlendGradient { base_logits: dz, net, positions }
    }

    pub fn retain(&mut self, keep: &[bool]) {
        let rows: Vec<usize> = (0..keep.len()).filter(|&i| keep[i]).collect();
        self.base_logits = self.base_logits.select(ndarray::Axis(0), &rows);
    }
}

/// Output of [`warp_to_observation`].
#[derive(Debug, Clone, PartialEq)]
pub struct WarpedGeometry {
    pub positions: Vec<Vector3<f64>>,
    pub rotations: Vec<UnitQuaternion<f64>>,
    /// Gaussians whose blended transform was degenerate; their rotation is
    /// passed through unchanged and they should not be rendered.
    pub degenerate: Vec<bool>,
}

/// Minimum determinant of the blended linear part.
pub const MIN_BLEND_DET: f64 = 1e-9;

fn blended(weights: ArrayView2<f64>, i: usize, jt: &JointTransforms) -> Matrix4<f64> {
    let mut t = Matrix4::zeros();
    for (k, tk) in jt.skinning.iter().enumerate() {
        let w = weights[[i, k]];
        if w != 0.0 {
            t += tk * w;
        }
    }
    t
}

fn check_counts(n: usize, rotations: usize, weights: ArrayView2<f64>, jt: &JointTransforms) -> Result<()> {
    if rotations != n || weights.nrows() != n {
        return Err(Error::Config(format!("mismatched gaussian counts: {n} positions, {rotations} rotations, {} weight rows", weights.nrows())));
    }
    if weights.ncols() != jt.skinning.len() {
        return Err(Error::JointCountMismatch { expected: jt.skinning.len(), got: weights.ncols() });
    }
    Ok(())
}

pub fn warp_to_observation(
    positions: &[Vector3<f64>],
    rotations: &[UnitQuaternion<f64>],
    weights: ArrayView2<f64>,
    jt: &JointTransforms,
) -> Result<WarpedGeometry> {
    check_counts(positions.len(), rotations.len(), weights, jt)?;
    let n = positions.len();
    let mut out = WarpedGeometry { positions: Vec::with_capacity(n), rotations: Vec::with_capacity(n), degenerate: vec![false; n] };
    for i in 0..n {
        let t = blended(weights, i, jt);
        let a: Matrix3<f64> = t.fixed_view::<3, 3>(0, 0).into();
        let b: Vector3<f64> = t.fixed_view::<3, 1>(0, 3).into();
        out.positions.push(a * positions[i] + b);
        let rc = quat_to_matrix(rotations[i].quaternion());
        match PolarFactor::new(&(a * rc), MIN_BLEND_DET) {
            Some(p) => out.rotations.push(matrix_to_quat(&p.rotation)),
            None => {
                out.degenerate[i] = true;
                out.rotations.push(rotations[i]);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct WarpGradient {
    pub positions: Vec<Vector3<f64>>,
    /// Gradient on the canonical rotation matrix `R_c`.
    pub rotation_matrices: Vec<Matrix3<f64>>,
    pub weights: Array2<f64>,
}

/// Reverse pass of [`warp_to_observation`] given gradients on the posed
/// positions and posed rotation matrices. Degenerate gaussians get zero
/// rotation gradient.
pub fn warp_backward(
    positions: &[Vector3<f64>],
    rotations: &[UnitQuaternion<f64>],
    weights: ArrayView2<f64>,
    jt: &JointTransforms,
    grad_positions: &[Vector3<f64>],
    grad_rotations: &[Matrix3<f64>],
) -> Result<WarpGradient> {
    check_counts(positions.len(), rotations.len(), weights, jt)?;
    let n = positions.len();
    let mut out = WarpGradient {
        positions: Vec::with_capacity(n),
        rotation_matrices: Vec::with_capacity(n),
        weights: Array2::zeros(weights.raw_dim()),
    };
    for i in 0..n {
        let t = blended(weights, i, jt);
        let a: Matrix3<f64> = t.fixed_view::<3, 3>(0, 0).into();
        let gx = grad_positions[i];
        // d/dA of A x + b, and d/db
        let mut ga = gx * positions[i].transpose();
        let gb = gx;
        let rc = quat_to_matrix(rotations[i].quaternion());
        let mut grc = Matrix3::zeros();
        if let Some(p) = PolarFactor::new(&(a * rc), MIN_BLEND_DET) {
            let gm = p.backward(&grad_rotations[i]);
            ga += gm * rc.transpose();
            grc = a.transpose() * gm;
        }
        out.positions.push(a.transpose() * gx);
        out.rotation_matrices.push(grc);
        for (k, tk) in jt.skinning.iter().enumerate() {
            let lin = tk.fixed_view::<3, 3>(0, 0);
            let tr = tk.fixed_view::<3, 1>(0, 3);
            out.weights[[i, k]] = ga.component_mul(&lin).sum() + gb.dot(&tr);
        }
    }
    Ok(out)
}

/// Part label of each gaussian's dominant joint (ties to the lowest index).
pub fn assign_gaussian_parts(weights: ArrayView2<f64>, skel: &Skeleton) -> Vec<BodyPart> {
    weights
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &w) in row.iter().enumerate() {
                if w > row[best] {
                    best = j;
                }
            }
            skel.part(best)
        })
        .collect()
}

/// Uniform sample inside the union of rest-pose bone capsules of `radius`.
pub fn sample_in_capsules<R: Rng>(skel: &Skeleton, radius: f64, rng: &mut R) -> Vector3<f64> {
    let segs = skel.bone_segments();
    if segs.is_empty() {
        let c = skel.rest_position(skel.root());
        loop {
            let v = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            if v.norm() <= 1.0 {
                return c + v * radius;
            }
        }
    }
    let bounds = skel.rest_bounds().expanded(radius);
    loop {
        let p = Vector3::new(
            rng.gen_range(bounds.min[0]..=bounds.max[0]),
            rng.gen_range(bounds.min[1]..=bounds.max[1]),
            rng.gen_range(bounds.min[2]..=bounds.max[2]),
        );
        if segs.iter().any(|s| s.distance(&p) <= radius) {
            return p;
        }
    }
}
