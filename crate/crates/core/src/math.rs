//! Small geometric helpers shared by the skinning, decoding and splatting code.

use std::ops::{Add, Mul, Sub};

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

/// Axis-aligned box in canonical space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: Vector3<f64>, max: Vector3<f64>) -> Self {
        Self { min: min.into(), max: max.into() }
    }

    pub fn from_points<'a>(points: impl IntoIterator<Item = &'a Vector3<f64>>) -> Option<Self> {
        let mut it = points.into_iter();
        let first = *it.next()?;
        let (lo, hi) = it.fold((first, first), |(lo, hi), p| (lo.inf(p), hi.sup(p)));
        Some(Self::new(lo, hi))
    }

    pub fn expanded(&self, margin: f64) -> Self {
        let m = Vector3::repeat(margin);
        Self::new(self.min_v() - m, self.max_v() + m)
    }

    pub fn min_v(&self) -> Vector3<f64> {
        Vector3::from(self.min)
    }

    pub fn max_v(&self) -> Vector3<f64> {
        Vector3::from(self.max)
    }

    pub fn extent(&self) -> Vector3<f64> {
        self.max_v() - self.min_v()
    }

    pub fn diagonal(&self) -> f64 {
        self.extent().norm()
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    /// Maps `p` affinely into `[0,1]^3` without clamping.
    pub fn normalize(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let e = self.extent();
        Vector3::new(
            (p.x - self.min[0]) / e.x,
            (p.y - self.min[1]) / e.y,
            (p.z - self.min[2]) / e.z,
        )
    }
}

/// Frame-index span mapped onto normalized time `[0,1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeRange {
    pub first_frame: f64,
    pub last_frame: f64,
}

impl TimeRange {
    pub fn new(first_frame: f64, last_frame: f64) -> Self {
        Self { first_frame, last_frame }
    }

    pub fn normalize(&self, frame: f64) -> f64 {
        let span = self.last_frame - self.first_frame;
        if span <= 0.0 {
            return 0.0;
        }
        ((frame - self.first_frame) / span).clamp(0.0, 1.0)
    }

    pub fn contains(&self, frame: f64) -> bool {
        frame >= self.first_frame && frame <= self.last_frame
    }
}

/// Rotation matrix of the quaternion `(w, x, y, z)` using the unit-quaternion
/// formula on the raw components.
pub fn quat_to_matrix(q: &Quaternion<f64>) -> Matrix3<f64> {
    let (w, x, y, z) = (q.w, q.i, q.j, q.k);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Pulls a gradient on the rotation matrix back to `(w, x, y, z)`.
pub fn quat_to_matrix_backward(q: &Quaternion<f64>, g: &Matrix3<f64>) -> [f64; 4] {
    let (w, x, y, z) = (q.w, q.i, q.j, q.k);
    let gw = 2.0 * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)] + x * g[(2, 1)]);
    let gx = 2.0
        * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)] + z * g[(2, 0)] + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]);
    let gy = 2.0
        * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)] - w * g[(2, 0)] + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]);
    let gz = 2.0
        * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)] - 2.0 * z * g[(1, 1)] + y * g[(1, 2)] + x * g[(2, 0)]
            + y * g[(2, 1)]);
    [gw, gx, gy, gz]
}

/// Unit quaternion of a proper rotation matrix, with non-negative real part.
pub fn matrix_to_quat(r: &Matrix3<f64>) -> UnitQuaternion<f64> {
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*r));
    if q.w < 0.0 {
        UnitQuaternion::new_unchecked(-q.into_inner())
    } else {
        q
    }
}

/// Nearest rotation to `m` (orthogonal polar factor), retained with the SVD
/// needed for the reverse pass.
#[derive(Debug, Clone)]
pub struct PolarFactor {
    pub rotation: Matrix3<f64>,
    u: Matrix3<f64>,
    v: Matrix3<f64>,
    sigma: Vector3<f64>,
}

impl PolarFactor {
    /// `None` when `det(m)` is below `min_det` (degenerate or reflecting).
    pub fn new(m: &Matrix3<f64>, min_det: f64) -> Option<Self> {
        if !(m.determinant() >= min_det) {
            return None;
        }
        let svd = m.svd(true, true);
        let u = svd.u?;
        let v = svd.v_t?.transpose();
        Some(Self { rotation: u * v.transpose(), u, v, sigma: svd.singular_values })
    }

    /// Gradient with respect to the input matrix given the gradient on the
    /// orthogonal factor.
    pub fn backward(&self, g: &Matrix3<f64>) -> Matrix3<f64> {
        let h = self.u.transpose() * g * self.v;
        let mut k = Matrix3::zeros();
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    k[(i, j)] = (h[(i, j)] - h[(j, i)]) / (self.sigma[i] + self.sigma[j]);
                }
            }
        }
        self.u * k * self.v.transpose()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Value plus gradient with respect to three inputs (forward-mode).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual3 {
    pub v: f64,
    pub d: [f64; 3],
}

impl Dual3 {
    pub fn constant(v: f64) -> Self {
        Self { v, d: [0.0; 3] }
    }

    pub fn variable(v: f64, axis: usize) -> Self {
        let mut d = [0.0; 3];
        d[axis] = 1.0;
        Self { v, d }
    }
}

impl Add for Dual3 {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self { v: self.v + o.v, d: [self.d[0] + o.d[0], self.d[1] + o.d[1], self.d[2] + o.d[2]] }
    }
}

impl Sub for Dual3 {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self { v: self.v - o.v, d: [self.d[0] - o.d[0], self.d[1] - o.d[1], self.d[2] - o.d[2]] }
    }
}

impl Mul for Dual3 {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        Self {
            v: self.v * o.v,
            d: [
                self.d[0] * o.v + self.v * o.d[0],
                self.d[1] * o.v + self.v * o.d[1],
                self.d[2] * o.v + self.v * o.d[2],
            ],
        }
    }
}

impl Mul<f64> for Dual3 {
    type Output = Self;
    fn mul(self, s: f64) -> Self {
        Self { v: self.v * s, d: [self.d[0] * s, self.d[1] * s, self.d[2] * s] }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn quat_matrix_roundtrip() {
        let q = UnitQuaternion::from_euler_angles(0.3, -1.1, 2.0);
        let r = quat_to_matrix(q.quaternion());
        assert_relative_eq!(r, *q.to_rotation_matrix().matrix(), epsilon = 1e-12);
        let back = matrix_to_quat(&r);
        assert!(back.w >= 0.0);
        assert_relative_eq!(quat_to_matrix(back.quaternion()), r, epsilon = 1e-12);
    }

    #[test]
    fn quat_backward_matches_finite_differences() {
        let q = Quaternion::new(0.4, -0.3, 0.7, 0.2);
        let g = Matrix3::new(0.3, -1.0, 0.2, 0.5, 0.1, -0.7, 0.9, 0.4, -0.2);
        let analytic = quat_to_matrix_backward(&q, &g);
        let h = 1e-6;
        for c in 0..4 {
            let mut qp = q.coords;
            let mut qm = q.coords;
            // coords order is (i, j, k, w)
            let idx = [3, 0, 1, 2][c];
            qp[idx] += h;
            qm[idx] -= h;
            let fp = quat_to_matrix(&Quaternion::from(qp)).component_mul(&g).sum();
            let fm = quat_to_matrix(&Quaternion::from(qm)).component_mul(&g).sum();
            assert_relative_eq!(analytic[c], (fp - fm) / (2.0 * h), epsilon = 1e-7);
        }
    }

    #[test]
    fn polar_backward_matches_finite_differences() {
        let m = Matrix3::new(1.1, 0.2, -0.1, -0.3, 0.9, 0.25, 0.05, -0.2, 1.3);
        let g = Matrix3::new(0.3, -1.0, 0.2, 0.5, 0.1, -0.7, 0.9, 0.4, -0.2);
        let p = PolarFactor::new(&m, 1e-9).unwrap();
        assert_relative_eq!(p.rotation.determinant(), 1.0, epsilon = 1e-12);
        let analytic = p.backward(&g);
        let h = 1e-6;
        for i in 0..3 {
            for j in 0..3 {
                let mut mp = m;
                let mut mm = m;
                mp[(i, j)] += h;
                mm[(i, j)] -= h;
                let fp = PolarFactor::new(&mp, 1e-9).unwrap().rotation.component_mul(&g).sum();
                let fm = PolarFactor::new(&mm, 1e-9).unwrap().rotation.component_mul(&g).sum();
                assert_relative_eq!(analytic[(i, j)], (fp - fm) / (2.0 * h), epsilon = 1e-7);
            }
        }
    }

    #[test]
    fn polar_rejects_degenerate() {
        assert!(PolarFactor::new(&Matrix3::zeros(), 1e-9).is_none());
        assert!(PolarFactor::new(&Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0)), 1e-9).is_none());
    }

    #[test]
    fn softmax_sums_to_one() {
        let w = softmax(&[1.0, -2.0, 30.0, 0.0]);
        assert_relative_eq!(w.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }
}
