use chronosplat::hexplane::{AxisPair, CodebookConfig, FeaturePlane, HexPlaneCodebook};
use chronosplat::math::{Aabb, TimeRange};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{rel_err, within, Check, Outcome};

pub const TOL: f64 = 1e-6;
pub const GRAD_TOL: f64 = 1e-3;

pub fn checks() -> Vec<Check> {
    vec![
        Check { name: "node exactness", run: node_exactness },
        Check { name: "per-axis bilinearity", run: per_axis_bilinearity },
        Check { name: "reference interpolation", run: reference_interpolation },
        Check { name: "gradient vs finite differences", run: gradient_vs_finite_differences },
    ]
}

fn unit_box() -> Aabb {
    Aabb::new(Vector3::new(-1.0, -1.0, -1.0), Vector3::new(1.0, 1.0, 1.0))
}

fn random_codebook(resolutions: Vec<usize>, time_resolution: usize, channels: usize, seed: u64) -> HexPlaneCodebook {
    let cfg = CodebookConfig { resolutions, time_resolution, channels, init_spread: 0.5 };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    HexPlaneCodebook::random(&cfg, unit_box(), TimeRange::new(0.0, 1.0), &mut rng).expect("valid config")
}

fn to_world(u: [f64; 3]) -> Vector3<f64> {
    Vector3::new(2.0 * u[0] - 1.0, 2.0 * u[1] - 1.0, 2.0 * u[2] - 1.0)
}

/// Direct bilinear read of one plane at normalized coordinates `(a, b)`.
fn sample_plane(plane: &FeaturePlane, a: f64, b: f64, c: usize) -> f64 {
    let lookup = |u: f64, n: usize| {
        let x = u.clamp(0.0, 1.0) * (n - 1) as f64;
        let i = (x.floor() as usize).min(n - 2);
        (i, x - i as f64)
    };
    let (col, fa) = lookup(a, plane.width);
    let (row, fb) = lookup(b, plane.height);
    let v = |r: usize, k: usize| plane.node(r, k)[c];
    (1.0 - fb) * ((1.0 - fa) * v(row, col) + fa * v(row, col + 1)) + fb * ((1.0 - fa) * v(row + 1, col) + fa * v(row + 1, col + 1))
}

/// Reference encoder: per scale, per channel product of six bilinear reads.
pub fn reference_encode(cb: &HexPlaneCodebook, u: [f64; 3], t: f64) -> Vec<f64> {
    let q = [u[0], u[1], u[2], t];
    let mut out = Vec::new();
    for level in &cb.scales {
        for c in 0..cb.channels {
            let mut prod = 1.0;
            for plane in &level.planes {
                let (a, b) = plane.axis_pair.axes();
                prod *= sample_plane(plane, q[a], q[b], c);
            }
            out.push(prod);
        }
    }
    out
}

pub fn node_exactness() -> Outcome {
    // Nodes of the coarse scale are also nodes of the fine one.
    let cb = random_codebook(vec![5, 9], 5, 3, 1);
    let mut worst: f64 = 0.0;
    for i in 0..5 {
        for j in 0..5 {
            for k in 0..5 {
                for l in 0..5 {
                    let u = [i as f64 / 4.0, j as f64 / 4.0, k as f64 / 4.0];
                    let t = l as f64 / 4.0;
                    let got = cb.encode(&to_world(u), t).map_err(|e| e.to_string())?;
                    let idx = [i, j, k, l];
                    for (s, level) in cb.scales.iter().enumerate() {
                        let step = (level.resolution - 1) / 4;
                        for c in 0..cb.channels {
                            let mut prod = 1.0;
                            for plane in &level.planes {
                                let (a, b) = plane.axis_pair.axes();
                                let col = idx[a] * if a == 3 { 1 } else { step };
                                let row = idx[b] * if b == 3 { 1 } else { step };
                                prod *= plane.node(row, col)[c];
                            }
                            worst = worst.max((got.values[s * cb.channels + c] - prod).abs());
                        }
                    }
                }
            }
        }
    }
    within("625 node queries", worst, TOL)
}

pub fn per_axis_bilinearity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for (p, pair) in AxisPair::ALL.iter().enumerate() {
        // Only plane `p` varies, so the feature is that plane's bilinear read.
        let mut cb = random_codebook(vec![6], 7, 4, 3 + p as u64);
        for (q, plane) in cb.scales[0].planes.iter_mut().enumerate() {
            if q != p {
                plane.data.iter_mut().for_each(|v| *v = 1.0);
            }
        }
        let (a, b) = pair.axes();
        for axis in [a, b] {
            for _ in 0..20 {
                let mut q: [f64; 4] = std::array::from_fn(|_| rng.gen_range(0.0..1.0));
                let n = if axis == 3 { 7 } else { 6 };
                let cell = rng.gen_range(0..n - 1) as f64;
                let h = 1.0 / (n - 1) as f64;
                let lo = (cell + rng.gen_range(0.0..0.45)) * h;
                let hi = (cell + rng.gen_range(0.55..1.0)) * h;
                let mut eval = |v: f64| {
                    q[axis] = v;
                    cb.encode(&to_world([q[0], q[1], q[2]]), q[3]).expect("finite query").values
                };
                let f0 = eval(lo);
                let f1 = eval(hi);
                let fm = eval(0.5 * (lo + hi));
                for c in 0..4 {
                    worst = worst.max((fm[c] - 0.5 * (f0[c] + f1[c])).abs());
                }
            }
        }
    }
    within("midpoint of 3 collinear points, 6 planes x 2 axes", worst, TOL)
}

pub fn reference_interpolation() -> Outcome {
    let cb = random_codebook(vec![4, 7, 13], 6, 5, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        // Slightly outside the box as well, to cover clamping.
        let u: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-0.05..1.05));
        let t = rng.gen_range(-0.05..1.05);
        let got = cb.encode(&to_world(u), t).map_err(|e| e.to_string())?;
        let want = reference_encode(&cb, u, t);
        for (g, w) in got.values.iter().zip(&want) {
            worst = worst.max((g - w).abs());
        }
    }
    within("1000 random queries", worst, TOL)
}

pub fn gradient_vs_finite_differences() -> Outcome {
    let mut cb = random_codebook(vec![3, 5], 4, 4, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        // Keep clear of cell boundaries, where the encoder is not smooth.
        let pick = |rng: &mut ChaCha8Rng| {
            let cell = rng.gen_range(0..2) as f64;
            (cell + rng.gen_range(0.1..0.9)) / 2.0
        };
        let u = [pick(&mut rng), pick(&mut rng), pick(&mut rng)];
        let t = (rng.gen_range(0..3) as f64 + rng.gen_range(0.1..0.9)) / 3.0;
        let x = to_world(u);
        let up: Vec<f64> = (0..cb.feature_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = |cb: &HexPlaneCodebook, x: &Vector3<f64>, t: f64| -> f64 {
            cb.encode(x, t).expect("finite query").values.iter().zip(&up).map(|(a, b)| a * b).sum()
        };
        let g = cb.encode_gradient(&x, t, &up).map_err(|e| e.to_string())?;
        for node in &g.nodes {
            let p = AxisPair::ALL.iter().position(|a| *a == node.plane).expect("known plane");
            let width = cb.scales[node.scale].planes[p].width;
            for c in 0..cb.channels {
                let idx = (node.row * width + node.col) * cb.channels + c;
                let orig = cb.scales[node.scale].planes[p].data[idx];
                cb.scales[node.scale].planes[p].data[idx] = orig + h;
                let lp = loss(&cb, &x, t);
                cb.scales[node.scale].planes[p].data[idx] = orig - h;
                let lm = loss(&cb, &x, t);
                cb.scales[node.scale].planes[p].data[idx] = orig;
                worst = worst.max(rel_err(node.values[c], (lp - lm) / (2.0 * h), 1e-6));
            }
        }
        for axis in 0..3 {
            let mut e = Vector3::zeros();
            e[axis] = h;
            let num = (loss(&cb, &(x + e), t) - loss(&cb, &(x - e), t)) / (2.0 * h);
            worst = worst.max(rel_err(g.position[axis], num, 1e-6));
        }
        let num = (loss(&cb, &x, t + h) - loss(&cb, &x, t - h)) / (2.0 * h);
        worst = worst.max(rel_err(g.time, num, 1e-6));
    }
    within("plane, position and time gradients at 10 queries", worst, GRAD_TOL)
}
