//! Photometric losses on interleaved RGB images with analytic gradients.

use crate::{Error, Result};

const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;
const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;

fn window() -> [f64; WINDOW] {
    let mut k = [0.0; WINDOW];
    let r = (WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable same-size convolution with zero padding on one channel plane.
fn blur(src: &[f64], w: usize, h: usize, k: &[f64; WINDOW]) -> Vec<f64> {
    let r = (WINDOW / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let xx = x as isize + i as isize - r;
                if xx >= 0 && (xx as usize) < w {
                    acc += kv * src[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let yy = y as isize + i as isize - r;
                if yy >= 0 && (yy as usize) < h {
                    acc += kv * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

fn check(a: &[f64], b: &[f64], w: usize, h: usize) -> Result<()> {
    if a.len() != w * h * 3 || b.len() != a.len() {
        return Err(Error::Config(format!("image sizes differ: {} and {} values for {w}x{h}", a.len(), b.len())));
    }
    Ok(())
}

/// Mean absolute error and its gradient with respect to `x`.
pub fn l1(x: &[f64], y: &[f64]) -> (f64, Vec<f64>) {
    let n = x.len() as f64;
    let loss = x.iter().zip(y).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
    let grad = x
        .iter()
        .zip(y)
        .map(|(a, b)| match a.partial_cmp(b) {
            Some(std::cmp::Ordering::Greater) => 1.0 / n,
            Some(std::cmp::Ordering::Less) => -1.0 / n,
            _ => 0.0,
        })
        .collect();
    (loss, grad)
}

/// Mean SSIM over pixels and channels (11x11 gaussian window, sigma 1.5)
/// and its gradient with respect to `x`.
pub fn ssim(x: &[f64], y: &[f64], w: usize, h: usize) -> Result<(f64, Vec<f64>)> {
    check(x, y, w, h)?;
    let k = window();
    let np = w * h;
    let norm = 1.0 / (np * 3) as f64;
    let mut total = 0.0;
    let mut grad = vec![0.0; x.len()];
    for ch in 0..3 {
        let xs: Vec<f64> = (0..np).map(|p| x[p * 3 + ch]).collect();
        let ys: Vec<f64> = (0..np).map(|p| y[p * 3 + ch]).collect();
        let sq = |v: &[f64], u: &[f64]| v.iter().zip(u).map(|(a, b)| a * b).collect::<Vec<f64>>();
        let mx = blur(&xs, w, h, &k);
        let my = blur(&ys, w, h, &k);
        let sxx = blur(&sq(&xs, &xs), w, h, &k);
        let syy = blur(&sq(&ys, &ys), w, h, &k);
        let sxy = blur(&sq(&xs, &ys), w, h, &k);
        let mut ga = vec![0.0; np];
        let mut gb = vec![0.0; np];
        let mut gc = vec![0.0; np];
        for p in 0..np {
            let (mux, muy) = (mx[p], my[p]);
            let vx = sxx[p] - mux * mux;
            let vy = syy[p] - muy * muy;
            let cxy = sxy[p] - mux * muy;
            let a1 = 2.0 * mux * muy + C1;
            let a2 = 2.0 * cxy + C2;
            let b1 = mux * mux + muy * muy + C1;
            let b2 = vx + vy + C2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            let ds_dmu = 2.0 * muy * a2 / (b1 * b2) - s * 2.0 * mux / b1;
            let ds_dvar = -s / b2;
            let ds_dcov = 2.0 * a1 / (b1 * b2);
            ga[p] = norm * (ds_dmu - 2.0 * mux * ds_dvar - muy * ds_dcov);
            gb[p] = norm * ds_dvar;
            gc[p] = norm * ds_dcov;
        }
        let ga = blur(&ga, w, h, &k);
        let gb = blur(&gb, w, h, &k);
        let gc = blur(&gc, w, h, &k);
        for p in 0..np {
            grad[p * 3 + ch] = ga[p] + 2.0 * xs[p] * gb[p] + ys[p] * gc[p];
        }
    }
    Ok((total * norm, grad))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhotometricLoss {
    pub total: f64,
    pub l1: f64,
    pub ssim: f64,
}

/// `(1 - lambda) * L1 + lambda * (1 - SSIM)` with its gradient.
pub fn photometric(x: &[f64], y: &[f64], w: usize, h: usize, lambda: f64) -> Result<(PhotometricLoss, Vec<f64>)> {
    check(x, y, w, h)?;
    let (l, gl) = l1(x, y);
    let (s, gs) = if lambda > 0.0 { ssim(x, y, w, h)? } else { (1.0, vec![0.0; x.len()]) };
    let grad = gl.iter().zip(&gs).map(|(a, b)| (1.0 - lambda) * a - lambda * b).collect();
    Ok((PhotometricLoss { total: (1.0 - lambda) * l + lambda * (1.0 - s), l1: l, ssim: s }, grad))
}
