//! Real spherical-harmonics colour evaluation up to degree 3.

use std::ops::{Add, Mul, Sub};

use nalgebra::Vector3;

use crate::math::Dual3;

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
const SH_C1: f64 = 0.488_602_511_902_919_9;
const SH_C2: [f64; 5] = [1.092_548_430_592_079_2, -1.092_548_430_592_079_2, 0.315_391_565_252_520_05, -1.092_548_430_592_079_2, 0.546_274_215_296_039_6];
const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

pub trait ShScalar: Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Mul<f64, Output = Self> {
    fn constant(c: f64) -> Self;
}

impl ShScalar for f64 {
    fn constant(c: f64) -> Self {
        c
    }
}

impl ShScalar for Dual3 {
    fn constant(c: f64) -> Self {
        Dual3::constant(c)
    }
}

pub fn basis_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Basis values for the unit direction `(x, y, z)`.
pub fn basis<T: ShScalar>(x: T, y: T, z: T, degree: usize, out: &mut Vec<T>) {
    out.clear();
    out.push(T::constant(SH_C0));
    if degree == 0 {
        return;
    }
    out.push(y * -SH_C1);
    out.push(z * SH_C1);
    out.push(x * -SH_C1);
    if degree == 1 {
        return;
    }
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let (xy, yz, xz) = (x * y, y * z, x * z);
    out.push(xy * SH_C2[0]);
    out.push(yz * SH_C2[1]);
    out.push((zz * 2.0 - xx - yy) * SH_C2[2]);
    out.push(xz * SH_C2[3]);
    out.push((xx - yy) * SH_C2[4]);
    if degree == 2 {
        return;
    }
    out.push(y * (xx * 3.0 - yy) * SH_C3[0]);
    out.push(xy * z * SH_C3[1]);
    out.push(y * (zz * 4.0 - xx - yy) * SH_C3[2]);
    out.push(z * (zz * 2.0 - xx * 3.0 - yy * 3.0) * SH_C3[3]);
    out.push(x * (zz * 4.0 - xx - yy) * SH_C3[4]);
    out.push(z * (xx - yy) * SH_C3[5]);
    out.push(x * (xx - yy * 3.0) * SH_C3[6]);
}

/// RGB of one gaussian seen along `dir` (unit), `0.5`-offset and clamped to
/// `[0,1]`. Also returns which channels were inside the clamp range.
pub fn eval_color(coeffs: &[f64], degree: usize, dir: &Vector3<f64>) -> ([f64; 3], [bool; 3]) {
    let mut b = Vec::with_capacity(16);
    basis(dir.x, dir.y, dir.z, degree, &mut b);
    let mut rgb = [0.5; 3];
    for (l, bl) in b.iter().enumerate() {
        for ch in 0..3 {
            rgb[ch] += bl * coeffs[l * 3 + ch];
        }
    }
    let mut active = [true; 3];
    for ch in 0..3 {
        active[ch] = (0.0..=1.0).contains(&rgb[ch]);
        rgb[ch] = rgb[ch].clamp(0.0, 1.0);
    }
    (rgb, active)
}

/// Reverse pass of [`eval_color`]: accumulates coefficient gradients into
/// `grad_coeffs` and returns the gradient with respect to the unit direction.
pub fn eval_color_backward(coeffs: &[f64], degree: usize, dir: &Vector3<f64>, active: [bool; 3], grad_rgb: [f64; 3], grad_coeffs: &mut [f64]) -> Vector3<f64> {
    let g: [f64; 3] = std::array::from_fn(|ch| if active[ch] { grad_rgb[ch] } else { 0.0 });
    let mut b = Vec::with_capacity(16);
    basis(Dual3::variable(dir.x, 0), Dual3::variable(dir.y, 1), Dual3::variable(dir.z, 2), degree, &mut b);
    let mut gdir = Vector3::zeros();
    for (l, bl) in b.iter().enumerate() {
        for ch in 0..3 {
            grad_coeffs[l * 3 + ch] += bl.v * g[ch];
            let w = coeffs[l * 3 + ch] * g[ch];
            gdir += Vector3::from(bl.d) * w;
        }
    }
    gdir
}
