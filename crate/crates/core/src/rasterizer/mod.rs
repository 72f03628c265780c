//! Tile-based CPU splatting of 3D gaussians.
//!
//! Gaussians are projected with a first-order (Jacobian) approximation, sorted
//! globally front-to-back by camera depth (stable by index) and alpha-blended
//! per pixel centre. A gaussian contributes to a pixel only within its 3-sigma
//! ellipse and when its effective alpha is at least `1/255`; a pixel stops
//! blending once its transmittance falls below `1e-4`. Because these rules
//! are per pixel, the image does not depend on the tile size.

pub mod image_io;
mod render;
pub mod sh;

use nalgebra::{Matrix2, Matrix3, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::decoder::GaussianColorStore;
use crate::math::quat_to_matrix;
use crate::skinning::BodyPart;
use crate::{Error, Result};

pub use render::{render, render_backward, render_with_state, RenderGradients, RenderState};

/// Added to the screen-space covariance diagonal (pixels squared).
pub const LOW_PASS: f64 = 0.3;
pub const MIN_ALPHA: f64 = 1.0 / 255.0;
pub const MIN_TRANSMITTANCE: f64 = 1e-4;
/// Squared Mahalanobis radius of the footprint (3 sigma).
pub const FOOTPRINT_SIGMA2: f64 = 9.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// World-to-camera rotation, rows are the camera axes (x right, y down,
    /// z forward).
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
    pub near: f64,
    pub far: f64,
}

impl Camera {
    /// Pinhole camera at `eye` looking at `target`, with `up` roughly
    /// opposite to the image's downward axis.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>, focal: f64, width: usize, height: usize) -> Self {
        let f = (target - eye).normalize();
        let r = f.cross(&up).normalize();
        let d = f.cross(&r);
        let rot = Matrix3::from_rows(&[r.transpose(), d.transpose(), f.transpose()]);
        let t = -(rot * eye);
        Self {
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            rotation: std::array::from_fn(|i| std::array::from_fn(|j| rot[(i, j)])),
            translation: t.into(),
            near: 0.01,
            far: 100.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Validation("camera focal lengths must be positive".into()));
        }
        if !(self.near < self.far && self.near > 0.0) {
            return Err(Error::Validation("camera needs 0 < near < far".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Validation("camera image size must be non-zero".into()));
        }
        Ok(())
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|i, j| self.rotation[i][j])
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation_matrix() * p + Vector3::from(self.translation)
    }

    /// Camera centre in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation_matrix().transpose() * Vector3::from(self.translation))
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

/// Observation-space gaussians ready for splatting.
#[derive(Debug, Clone, PartialEq)]
pub struct PosedGaussianSet {
    pub positions: Vec<Vector3<f64>>,
    pub rotations: Vec<UnitQuaternion<f64>>,
    pub scales: Vec<Vector3<f64>>,
    pub opacities: Vec<f64>,
    pub colors: GaussianColorStore,
    pub parts: Vec<BodyPart>,
}

impl PosedGaussianSet {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn empty(sh_degree: usize) -> Self {
        Self {
            positions: Vec::new(),
            rotations: Vec::new(),
            scales: Vec::new(),
            opacities: Vec::new(),
            colors: GaussianColorStore::new(sh_degree, 0).expect("valid degree"),
            parts: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.rotations.len() != n || self.scales.len() != n || self.opacities.len() != n || self.colors.len() != n {
            return Err(Error::Config("posed gaussian arrays have inconsistent lengths".into()));
        }
        if !self.parts.is_empty() && self.parts.len() != n {
            return Err(Error::Config("part labels do not match gaussian count".into()));
        }
        Ok(())
    }

    /// Subset of gaussians, in the given order.
    pub fn select(&self, idx: &[usize]) -> Self {
        let per = self.colors.per_gaussian();
        let mut coeffs = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            coeffs.extend_from_slice(self.colors.block(i));
        }
        Self {
            positions: idx.iter().map(|&i| self.positions[i]).collect(),
            rotations: idx.iter().map(|&i| self.rotations[i]).collect(),
            scales: idx.iter().map(|&i| self.scales[i]).collect(),
            opacities: idx.iter().map(|&i| self.opacities[i]).collect(),
            colors: GaussianColorStore { degree: self.colors.degree, coeffs },
            parts: if self.parts.is_empty() { Vec::new() } else { idx.iter().map(|&i| self.parts[i]).collect() },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderSettings {
    pub background: [f64; 3],
    pub tile_size: usize,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self { background: [0.0; 3], tile_size: 16 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedImage {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB.
    pub rgb: Vec<f64>,
    pub transmittance: Vec<f64>,
    pub contributors: Vec<u32>,
}

impl RenderedImage {
    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut buf = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            buf.extend_from_slice(&rgb);
        }
        Self { width, height, rgb: buf, transmittance: vec![1.0; width * height], contributors: vec![0; width * height] }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let o = (y * self.width + x) * 3;
        [self.rgb[o], self.rgb[o + 1], self.rgb[o + 2]]
    }
}

/// Mean squared error over all RGB values.
pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Peak signal-to-noise ratio in dB for signals in `[0,1]`.
pub fn psnr(a: &[f64], b: &[f64]) -> f64 {
    let m = mse(a, b);
    if m == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * m.log10()
    }
}

/// `R diag(s)^2 R^T`.
pub fn covariance_3d(rotation: &UnitQuaternion<f64>, scale: &Vector3<f64>) -> Matrix3<f64> {
    let r = quat_to_matrix(rotation.quaternion());
    let d = Matrix3::from_diagonal(&scale.component_mul(scale));
    r * d * r.transpose()
}

/// Screen-space footprint of one gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedGaussian {
    pub mean: Vector2<f64>,
    /// Includes the low-pass term.
    pub covariance: Matrix2<f64>,
    pub depth: f64,
}

/// Jacobian of the pinhole projection at camera-space point `p`.
pub(crate) fn projection_jacobian(cam: &Camera, p: &Vector3<f64>) -> nalgebra::Matrix2x3<f64> {
    let iz = 1.0 / p.z;
    nalgebra::Matrix2x3::new(cam.fx * iz, 0.0, -cam.fx * p.x * iz * iz, 0.0, cam.fy * iz, -cam.fy * p.y * iz * iz)
}

/// Projects one gaussian; `None` when its centre is outside `[near, far]`.
pub fn project_gaussian(position: &Vector3<f64>, covariance: &Matrix3<f64>, cam: &Camera) -> Option<ProjectedGaussian> {
    let p = cam.to_camera(position);
    if p.z < cam.near || p.z > cam.far {
        return None;
    }
    let mean = Vector2::new(cam.fx * p.x / p.z + cam.cx, cam.fy * p.y / p.z + cam.cy);
    let j = projection_jacobian(cam, &p);
    let w = cam.rotation_matrix();
    let cov = j * w * covariance * w.transpose() * j.transpose() + Matrix2::identity() * LOW_PASS;
    Some(ProjectedGaussian { mean, covariance: cov, depth: p.z })
}
