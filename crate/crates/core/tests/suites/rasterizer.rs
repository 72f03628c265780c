use chronosplat::decoder::GaussianColorStore;
use chronosplat::rasterizer::sh::SH_C0;
use chronosplat::rasterizer::{render, render_backward, render_with_state, Camera, PosedGaussianSet, RenderSettings, MIN_TRANSMITTANCE};
use nalgebra::{Matrix2, Matrix2x3, Matrix3, Quaternion, UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{within, Check, Outcome};

pub const TOL: f64 = 1e-6;
pub const GRAD_TOL: f64 = 1e-3;

pub fn checks() -> Vec<Check> {
    vec![
        Check { name: "brute-force blend oracle", run: brute_force_oracle },
        Check { name: "tiling invariance", run: tiling_invariance },
        Check { name: "transmittance monotone", run: transmittance_monotone },
        Check { name: "full occlusion", run: full_occlusion },
        Check { name: "backward vs finite differences", run: backward_vs_finite_differences },
    ]
}

pub fn camera(width: usize, height: usize, focal: f64) -> Camera {
    Camera::look_at(Vector3::new(0.3, -0.2, -3.0), Vector3::zeros(), Vector3::new(0.0, -1.0, 0.0), focal, width, height)
}

pub fn random_set(rng: &mut ChaCha8Rng, n: usize, degree: usize, spread: f64, scale: (f64, f64)) -> PosedGaussianSet {
    let per = (degree + 1) * (degree + 1) * 3;
    let mut coeffs = Vec::with_capacity(n * per);
    for _ in 0..n {
        for l in 0..per {
            // Colours stay inside (0, 1) so the clamp is inactive.
            coeffs.push(if l < 3 { rng.gen_range(-1.2..1.2) } else { rng.gen_range(-0.2..0.2) });
        }
    }
    PosedGaussianSet {
        positions: (0..n).map(|_| Vector3::new(rng.gen_range(-spread..spread), rng.gen_range(-spread..spread), rng.gen_range(-spread..spread))).collect(),
        rotations: (0..n)
            .map(|_| UnitQuaternion::from_scaled_axis(Vector3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0))))
            .collect(),
        scales: (0..n).map(|_| Vector3::new(rng.gen_range(scale.0..scale.1), rng.gen_range(scale.0..scale.1), rng.gen_range(scale.0..scale.1))).collect(),
        opacities: (0..n).map(|_| rng.gen_range(0.3..0.95)).collect(),
        colors: GaussianColorStore { degree, coeffs },
        parts: Vec::new(),
    }
}

/// Direct per-pixel evaluation: every gaussian's alpha at the pixel centre,
/// then a stable depth sort and front-to-back compositing.
pub fn brute_force(set: &PosedGaussianSet, cam: &Camera, bg: [f64; 3]) -> Vec<f64> {
    assert_eq!(set.colors.degree, 0);
    let w = cam.rotation_matrix();
    let mut out = Vec::with_capacity(cam.pixel_count() * 3);
    for py in 0..cam.height {
        for px in 0..cam.width {
            let mut hits: Vec<(f64, usize, f64)> = Vec::new();
            for i in 0..set.len() {
                let p = w * set.positions[i] + Vector3::from(cam.translation);
                if p.z < cam.near || p.z > cam.far {
                    continue;
                }
                let r = set.rotations[i].to_rotation_matrix().into_inner();
                let s2 = set.scales[i].component_mul(&set.scales[i]);
                let cov3 = r * Matrix3::from_diagonal(&s2) * r.transpose();
                let j = Matrix2x3::new(cam.fx / p.z, 0.0, -cam.fx * p.x / (p.z * p.z), 0.0, cam.fy / p.z, -cam.fy * p.y / (p.z * p.z));
                let cov2 = j * w * cov3 * w.transpose() * j.transpose() + Matrix2::identity() * 0.3;
                let mean = Vector2::new(cam.fx * p.x / p.z + cam.cx, cam.fy * p.y / p.z + cam.cy);
                let d = Vector2::new(px as f64 + 0.5, py as f64 + 0.5) - mean;
                let maha = d.dot(&(cov2.try_inverse().expect("invertible") * d));
                if maha > 9.0 {
                    continue;
                }
                let alpha = set.opacities[i] * (-0.5 * maha).exp();
                if alpha >= 1.0 / 255.0 {
                    hits.push((p.z, i, alpha));
                }
            }
            hits.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut t = 1.0;
            let mut rgb = [0.0; 3];
            for &(_, i, alpha) in &hits {
                for (ch, v) in rgb.iter_mut().enumerate() {
                    let c = (0.5 + SH_C0 * set.colors.coeffs[i * 3 + ch]).clamp(0.0, 1.0);
                    *v += c * alpha * t;
                }
                t *= 1.0 - alpha;
                if t < MIN_TRANSMITTANCE {
                    break;
                }
            }
            for ch in 0..3 {
                out.push(rgb[ch] + t * bg[ch]);
            }
        }
    }
    out
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn brute_force_oracle() -> Outcome {
    let mut worst: f64 = 0.0;
    let bg = [0.1, 0.2, 0.3];
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let set = random_set(&mut rng, 10, 0, 0.6, (0.05, 0.4));
        let cam = camera(16, 16, 16.0);
        let img = render(&set, &cam, &RenderSettings { background: bg, tile_size: 16 }).map_err(|e| e.to_string())?;
        worst = worst.max(max_abs_diff(&img.rgb, &brute_force(&set, &cam, bg)));
    }
    within("20 scenes of 10 gaussians at 16x16", worst, TOL)
}

pub fn tiling_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    let set = random_set(&mut rng, 60, 2, 0.8, (0.02, 0.3));
    let cam = camera(37, 29, 30.0);
    let reference = render(&set, &cam, &RenderSettings { background: [0.2; 3], tile_size: 16 }).map_err(|e| e.to_string())?;
    for tile_size in [1, 2, 3, 5, 8, 13, 64] {
        let img = render(&set, &cam, &RenderSettings { background: [0.2; 3], tile_size }).map_err(|e| e.to_string())?;
        let same = img.rgb.iter().zip(&reference.rgb).all(|(a, b)| a.to_bits() == b.to_bits())
            && img.transmittance.iter().zip(&reference.transmittance).all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            return Err(format!("tile size {tile_size} differs from tile size 16"));
        }
    }
    Ok("tile sizes 1..64 give bit-identical images".into())
}

pub fn transmittance_monotone() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(300);
    let set = random_set(&mut rng, 30, 0, 0.5, (0.05, 0.35));
    let cam = camera(24, 24, 24.0);
    let settings = RenderSettings::default();
    let (_, state) = render_with_state(&set, &cam, &settings).map_err(|e| e.to_string())?;
    let order = state.sort_order();
    let mut prev = vec![1.0; cam.pixel_count()];
    for m in 1..=order.len() {
        let img = render(&set.select(&order[..m]), &cam, &settings).map_err(|e| e.to_string())?;
        for (p, (&t, &before)) in img.transmittance.iter().zip(&prev).enumerate() {
            if !(0.0..=1.0).contains(&t) {
                return Err(format!("transmittance {t} out of [0,1] at pixel {p}"));
            }
            // Early termination may stop a longer prefix slightly above a
            // shorter one's value, never above the termination threshold.
            if t > before && t >= MIN_TRANSMITTANCE {
                return Err(format!("transmittance rose from {before} to {t} at pixel {p} with {m} gaussians"));
            }
        }
        prev = img.transmittance;
    }
    Ok(format!("non-increasing over {} depth-ordered prefixes", order.len()))
}

pub fn full_occlusion() -> Outcome {
    let cam = camera(16, 16, 16.0);
    let centre = cam.center();
    let towards = (Vector3::zeros() - centre).normalize();
    let wall = PosedGaussianSet {
        positions: vec![centre + towards * 1.5],
        rotations: vec![UnitQuaternion::identity()],
        scales: vec![Vector3::new(300.0, 300.0, 300.0)],
        opacities: vec![1.0],
        colors: GaussianColorStore { degree: 0, coeffs: vec![0.5, -0.5, 0.0] },
        parts: Vec::new(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(400);
    let behind = random_set(&mut rng, 8, 0, 0.4, (0.1, 0.3));
    let mut combined = behind.select(&(0..behind.len()).collect::<Vec<_>>());
    combined.positions.extend(&wall.positions);
    combined.rotations.extend(&wall.rotations);
    combined.scales.extend(&wall.scales);
    combined.opacities.extend(&wall.opacities);
    combined.colors.coeffs.extend(&wall.colors.coeffs);
    let settings = RenderSettings { background: [0.7, 0.1, 0.9], tile_size: 16 };
    let alone = render(&wall, &cam, &settings).map_err(|e| e.to_string())?;
    let both = render(&combined, &cam, &settings).map_err(|e| e.to_string())?;
    let mut covered = 0;
    for p in 0..cam.pixel_count() {
        if alone.transmittance[p] < MIN_TRANSMITTANCE {
            covered += 1;
            if alone.rgb[p * 3..p * 3 + 3] != both.rgb[p * 3..p * 3 + 3] {
                return Err(format!("pixel {p} behind an opaque gaussian changed"));
            }
        }
    }
    if covered < cam.pixel_count() / 2 {
        return Err(format!("only {covered} pixels fully covered"));
    }
    Ok(format!("{covered} fully covered pixels ignore the gaussians behind"))
}

pub fn backward_vs_finite_differences() -> Outcome {
    let cam = camera(8, 8, 8.0);
    let settings = RenderSettings { background: [0.3, 0.1, 0.2], tile_size: 4 };
    let mut worst: f64 = 0.0;
    for seed in 0..4 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let set = random_set(&mut rng, 6, 1, 0.5, (0.15, 0.45));
        let up: Vec<f64> = (0..cam.pixel_count() * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = |s: &PosedGaussianSet| -> f64 { render(s, &cam, &settings).expect("render").rgb.iter().zip(&up).map(|(a, b)| a * b).sum() };
        let (_, state) = render_with_state(&set, &cam, &settings).map_err(|e| e.to_string())?;
        let g = render_backward(&set, &cam, &settings, &state, &up).map_err(|e| e.to_string())?;
        let h = 1e-6;
        let fd = |edit: &dyn Fn(&mut PosedGaussianSet, f64)| {
            let mut p = set.clone();
            edit(&mut p, h);
            let mut m = set.clone();
            edit(&mut m, -h);
            (loss(&p) - loss(&m)) / (2.0 * h)
        };
        let mut pairs: Vec<(f64, f64)> = Vec::new();
        for i in 0..set.len() {
            for a in 0..3 {
                pairs.push((g.positions[i][a], fd(&|s, d| s.positions[i][a] += d)));
                pairs.push((g.scales[i][a], fd(&|s, d| s.scales[i][a] += d)));
            }
            for c in 0..4 {
                let nudge = move |s: &mut PosedGaussianSet, d: f64| {
                    let mut q = *s.rotations[i].quaternion();
                    q.coords[(c + 3) % 4] += d;
                    s.rotations[i] = UnitQuaternion::new_unchecked(Quaternion::from(q.coords));
                };
                pairs.push((g.rotations[i][c], fd(&nudge)));
            }
            pairs.push((g.opacities[i], fd(&|s, d| s.opacities[i] += d)));
            for k in 0..set.colors.per_gaussian() {
                let idx = i * set.colors.per_gaussian() + k;
                pairs.push((g.sh[idx], fd(&|s, d| s.colors.coeffs[idx] += d)));
            }
        }
        let scale = pairs.iter().map(|(a, _)| a.abs()).fold(0.0, f64::max);
        for (a, n) in pairs {
            worst = worst.max((a - n).abs() / a.abs().max(n.abs()).max(1e-3 * scale));
        }
    }
    within("positions, scales, rotations, opacities and SH of 6 gaussians at 8x8", worst, GRAD_TOL)
}
