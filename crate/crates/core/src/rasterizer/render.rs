use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use super::sh::{eval_color, eval_color_backward};
use super::{
    covariance_3d, projection_jacobian, Camera, PosedGaussianSet, RenderSettings, RenderedImage, FOOTPRINT_SIGMA2, LOW_PASS,
    MIN_ALPHA, MIN_TRANSMITTANCE,
};
use crate::math::{quat_to_matrix, quat_to_matrix_backward};
use crate::{Error, Result};

/// Per-gaussian projection data, in blend order.
#[derive(Debug, Clone)]
struct Splat {
    index: usize,
    mean: Vector2<f64>,
    conic: Matrix2<f64>,
    depth: f64,
    color: [f64; 3],
    active: [bool; 3],
    opacity: f64,
    /// Pixel ranges `[x0, x1) x [y0, y1)`.
    rect: [usize; 4],
    p_cam: Vector3<f64>,
    view_dir: Vector3<f64>,
    view_dist: f64,
}

/// Forward state retained for [`render_backward`].
#[derive(Debug, Clone)]
pub struct RenderState {
    splats: Vec<Splat>,
    tiles: Vec<Vec<u32>>,
    tiles_x: usize,
    tile_size: usize,
}

impl RenderState {
    /// Gaussian indices in blend (front-to-back) order; culled ones omitted.
    pub fn sort_order(&self) -> Vec<usize> {
        self.splats.iter().map(|s| s.index).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderGradients {
    pub positions: Vec<Vector3<f64>>,
    /// `(w, x, y, z)`.
    pub rotations: Vec<[f64; 4]>,
    pub rotation_matrices: Vec<Matrix3<f64>>,
    pub scales: Vec<Vector3<f64>>,
    pub opacities: Vec<f64>,
    /// Same layout as the colour store.
    pub sh: Vec<f64>,
}

impl RenderGradients {
    fn zeros(set: &PosedGaussianSet) -> Self {
        let n = set.len();
        Self {
            positions: vec![Vector3::zeros(); n],
            rotations: vec![[0.0; 4]; n],
            rotation_matrices: vec![Matrix3::zeros(); n],
            scales: vec![Vector3::zeros(); n],
            opacities: vec![0.0; n],
            sh: vec![0.0; set.colors.coeffs.len()],
        }
    }
}

fn prepare(set: &PosedGaussianSet, cam: &Camera, tile_size: usize) -> Result<RenderState> {
    set.validate()?;
    cam.validate()?;
    if tile_size == 0 {
        return Err(Error::Config("tile size must be positive".into()));
    }
    let center = cam.center();
    let w = cam.rotation_matrix();
    let mut splats = Vec::with_capacity(set.len());
    for i in 0..set.len() {
        let p = cam.to_camera(&set.positions[i]);
        if p.z < cam.near || p.z > cam.far || set.opacities[i] <= 0.0 {
            continue;
        }
        let cov3 = covariance_3d(&set.rotations[i], &set.scales[i]);
        let j = projection_jacobian(cam, &p);
        let cov = j * w * cov3 * w.transpose() * j.transpose() + Matrix2::identity() * LOW_PASS;
        let conic = cov.try_inverse().expect("low-pass floor keeps the screen covariance invertible");
        let mean = Vector2::new(cam.fx * p.x / p.z + cam.cx, cam.fy * p.y / p.z + cam.cy);
        let mid = 0.5 * (cov[(0, 0)] + cov[(1, 1)]);
        let det = cov.determinant();
        let lambda = mid + (mid * mid - det).max(0.0).sqrt();
        let radius = FOOTPRINT_SIGMA2.sqrt() * lambda.sqrt();
        if !(mean.x.is_finite() && mean.y.is_finite() && radius.is_finite()) {
            continue;
        }
        let lo = |m: f64| (m - radius - 0.5).ceil().max(0.0);
        let hi = |m: f64, n: usize| ((m + radius - 0.5).floor() + 1.0).min(n as f64);
        let (x0, x1, y0, y1) = (lo(mean.x), hi(mean.x, cam.width), lo(mean.y), hi(mean.y, cam.height));
        if x0 >= x1 || y0 >= y1 {
            continue;
        }
        let v = set.positions[i] - center;
        let view_dist = v.norm();
        let view_dir = if view_dist > 0.0 { v / view_dist } else { Vector3::z() };
        let (color, active) = eval_color(set.colors.block(i), set.colors.degree, &view_dir);
        splats.push(Splat {
            index: i,
            mean,
            conic,
            depth: p.z,
            color,
            active,
            opacity: set.opacities[i],
            rect: [x0 as usize, x1 as usize, y0 as usize, y1 as usize],
            p_cam: p,
            view_dir,
            view_dist,
        });
    }
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));

    let tiles_x = cam.width.div_ceil(tile_size);
    let tiles_y = cam.height.div_ceil(tile_size);
    let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
    for (k, s) in splats.iter().enumerate() {
        let [x0, x1, y0, y1] = s.rect;
        for ty in y0 / tile_size..=(y1 - 1) / tile_size {
            for tx in x0 / tile_size..=(x1 - 1) / tile_size {
                tiles[ty * tiles_x + tx].push(k as u32);
            }
        }
    }
    Ok(RenderState { splats, tiles, tiles_x, tile_size })
}

/// One blend step at a pixel: splat, effective alpha, transmittance before,
/// gaussian falloff and offset from the mean.
#[derive(Debug, Clone, Copy)]
struct Contribution {
    splat: usize,
    alpha: f64,
    transmittance: f64,
    falloff: f64,
    offset: Vector2<f64>,
}

fn blend_pixel(splats: &[Splat], list: &[u32], px: usize, py: usize, mut visit: impl FnMut(Contribution)) -> ([f64; 3], f64, u32) {
    let centre = Vector2::new(px as f64 + 0.5, py as f64 + 0.5);
    let mut t = 1.0;
    let mut rgb = [0.0; 3];
    let mut count = 0;
    for &k in list {
        let s = &splats[k as usize];
        let [x0, x1, y0, y1] = s.rect;
        if px < x0 || px >= x1 || py < y0 || py >= y1 {
            continue;
        }
        let d = centre - s.mean;
        let maha = d.dot(&(s.conic * d));
        if maha > FOOTPRINT_SIGMA2 {
            continue;
        }
        let falloff = (-0.5 * maha).exp();
        let alpha = s.opacity * falloff;
        if alpha < MIN_ALPHA {
            continue;
        }
        visit(Contribution { splat: k as usize, alpha, transmittance: t, falloff, offset: d });
        for ch in 0..3 {
            rgb[ch] += s.color[ch] * alpha * t;
        }
        t *= 1.0 - alpha;
        count += 1;
        if t < MIN_TRANSMITTANCE {
            break;
        }
    }
    (rgb, t, count)
}

fn tile_pixels(state: &RenderState, tile: usize, width: usize, height: usize) -> impl Iterator<Item = (usize, usize)> {
    let ts = state.tile_size;
    let (tx, ty) = (tile % state.tiles_x, tile / state.tiles_x);
    let (x0, y0) = (tx * ts, ty * ts);
    let (x1, y1) = ((x0 + ts).min(width), (y0 + ts).min(height));
    (y0..y1).flat_map(move |y| (x0..x1).map(move |x| (x, y)))
}

pub fn render(set: &PosedGaussianSet, cam: &Camera, settings: &RenderSettings) -> Result<RenderedImage> {
    Ok(render_with_state(set, cam, settings)?.0)
}

pub fn render_with_state(set: &PosedGaussianSet, cam: &Camera, settings: &RenderSettings) -> Result<(RenderedImage, RenderState)> {
    let state = prepare(set, cam, settings.tile_size)?;
    let (w, h) = (cam.width, cam.height);
    let bg = settings.background;
    let per_tile: Vec<Vec<(usize, [f64; 3], f64, u32)>> = (0..state.tiles.len())
        .into_par_iter()
        .map(|tile| {
            tile_pixels(&state, tile, w, h)
                .map(|(x, y)| {
                    let (mut rgb, t, count) = blend_pixel(&state.splats, &state.tiles[tile], x, y, |_| {});
                    for ch in 0..3 {
                        rgb[ch] += t * bg[ch];
                    }
                    (y * w + x, rgb, t, count)
                })
                .collect()
        })
        .collect();
    let mut image = RenderedImage::filled(w, h, bg);
    for (pix, rgb, t, count) in per_tile.into_iter().flatten() {
        image.rgb[pix * 3..pix * 3 + 3].copy_from_slice(&rgb);
        image.transmittance[pix] = t;
        image.contributors[pix] = count;
    }
    Ok((image, state))
}

#[derive(Debug, Clone, Copy, Default)]
struct ScreenGradient {
    mean: Vector2<f64>,
    conic: Matrix2<f64>,
    opacity: f64,
    color: [f64; 3],
}

/// Gradients of `sum(upstream * image.rgb)` with respect to every gaussian
/// attribute. The depth order is treated as constant.
pub fn render_backward(
    set: &PosedGaussianSet,
    cam: &Camera,
    settings: &RenderSettings,
    state: &RenderState,
    upstream: &[f64],
) -> Result<RenderGradients> {
    let (w, h) = (cam.width, cam.height);
    if upstream.len() != w * h * 3 {
        return Err(Error::Config(format!("upstream has {} values, image has {}", upstream.len(), w * h * 3)));
    }
    let bg = settings.background;
    let splats = &state.splats;
    let per_tile: Vec<Vec<ScreenGradient>> = (0..state.tiles.len())
        .into_par_iter()
        .map(|tile| {
            let list = &state.tiles[tile];
            let mut local = vec![ScreenGradient::default(); list.len()];
            // splat index -> position in this tile's list
            let slot = |k: usize| list.binary_search(&(k as u32)).expect("splat listed in tile");
            let mut contribs = Vec::new();
            for (x, y) in tile_pixels(state, tile, w, h) {
                let pix = y * w + x;
                let dc = [upstream[pix * 3], upstream[pix * 3 + 1], upstream[pix * 3 + 2]];
                if dc == [0.0; 3] {
                    continue;
                }
                contribs.clear();
                blend_pixel(splats, list, x, y, |c| contribs.push(c));
                let mut behind = bg;
                for c in contribs.iter().rev() {
                    let s = &splats[c.splat];
                    let g = &mut local[slot(c.splat)];
                    let mut dalpha = 0.0;
                    for ch in 0..3 {
                        g.color[ch] += dc[ch] * c.alpha * c.transmittance;
                        dalpha += dc[ch] * c.transmittance * (s.color[ch] - behind[ch]);
                        behind[ch] = s.color[ch] * c.alpha + (1.0 - c.alpha) * behind[ch];
                    }
                    g.opacity += dalpha * c.falloff;
                    let dpower = dalpha * c.alpha;
                    g.mean += s.conic * c.offset * dpower;
                    g.conic += c.offset * c.offset.transpose() * (-0.5 * dpower);
                }
            }
            local
        })
        .collect();

    let mut screen = vec![ScreenGradient::default(); splats.len()];
    for (tile, grads) in per_tile.into_iter().enumerate() {
        for (&k, g) in state.tiles[tile].iter().zip(grads) {
            let acc = &mut screen[k as usize];
            acc.mean += g.mean;
            acc.conic += g.conic;
            acc.opacity += g.opacity;
            for ch in 0..3 {
                acc.color[ch] += g.color[ch];
            }
        }
    }

    let mut out = RenderGradients::zeros(set);
    let wr = cam.rotation_matrix();
    let per = set.colors.per_gaussian();
    for (s, g) in splats.iter().zip(&screen) {
        let i = s.index;
        let p = s.p_cam;
        let jac: Matrix2x3<f64> = projection_jacobian(cam, &p);
        let q = set.rotations[i].quaternion();
        let r = quat_to_matrix(q);
        let sc = set.scales[i];
        let d = Matrix3::from_diagonal(&sc.component_mul(&sc));
        let cov3 = r * d * r.transpose();
        let m = wr * cov3 * wr.transpose();

        let g2 = -(s.conic * g.conic * s.conic);
        let dm = jac.transpose() * g2 * jac;
        let djac = 2.0 * g2 * jac * m;
        let dcov3 = wr.transpose() * dm * wr;

        let iz = 1.0 / p.z;
        let (fx, fy) = (cam.fx, cam.fy);
        let mut dp = jac.transpose() * g.mean;
        dp.x += djac[(0, 2)] * (-fx * iz * iz);
        dp.y += djac[(1, 2)] * (-fy * iz * iz);
        dp.z += djac[(0, 0)] * (-fx * iz * iz)
            + djac[(0, 2)] * (2.0 * fx * p.x * iz * iz * iz)
            + djac[(1, 1)] * (-fy * iz * iz)
            + djac[(1, 2)] * (2.0 * fy * p.y * iz * iz * iz);
        let mut dx = wr.transpose() * dp;

        let gdir = eval_color_backward(set.colors.block(i), set.colors.degree, &s.view_dir, s.active, g.color, &mut out.sh[i * per..(i + 1) * per]);
        dx += (Matrix3::identity() - s.view_dir * s.view_dir.transpose()) * gdir / s.view_dist;

        let g3 = 0.5 * (dcov3 + dcov3.transpose());
        let dr = 2.0 * g3 * r * d;
        let rgr = r.transpose() * g3 * r;
        out.scales[i] = Vector3::new(2.0 * sc.x * rgr[(0, 0)], 2.0 * sc.y * rgr[(1, 1)], 2.0 * sc.z * rgr[(2, 2)]);
        out.rotation_matrices[i] = dr;
        out.rotations[i] = quat_to_matrix_backward(q, &dr);
        out.positions[i] = dx;
        out.opacities[i] = g.opacity;
    }
    Ok(out)
}
