use chronosplat::math::Aabb;
use chronosplat::skinning::{
    forward_kinematics, warp_to_observation, BlendFieldConfig, BlendWeightField, BodyPart, Joint, Pose, Skeleton,
};
use nalgebra::{Matrix3, Matrix4, UnitQuaternion, Vector3};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{within, Check, Outcome};

pub const TOL: f64 = 1e-6;

pub fn checks() -> Vec<Check> {
    vec![
        Check { name: "rest-pose identity", run: rest_pose_identity },
        Check { name: "blend summation oracle", run: blend_summation_oracle },
        Check { name: "partition of unity", run: partition_of_unity },
        Check { name: "forward kinematics vs recursion", run: fk_vs_recursion },
    ]
}

pub fn random_skeleton(rng: &mut ChaCha8Rng, joints: usize) -> Skeleton {
    let list = (0..joints)
        .map(|i| Joint {
            name: format!("j{i}"),
            parent: if i == 0 { None } else { Some(rng.gen_range(0..i)) },
            rest_position: std::array::from_fn(|_| rng.gen_range(-1.0..1.0)),
            part: BodyPart::ALL[rng.gen_range(0..5)],
        })
        .collect();
    Skeleton::new(list).expect("random tree is valid")
}

pub fn random_pose(rng: &mut ChaCha8Rng, joints: usize) -> Pose {
    let v = |rng: &mut ChaCha8Rng, s: f64| Vector3::new(rng.gen_range(-s..s), rng.gen_range(-s..s), rng.gen_range(-s..s));
    Pose { thetas: (0..joints).map(|_| v(rng, 1.5)).collect(), root_translation: v(rng, 0.5) }
}

/// Axis-angle to matrix by the Rodrigues formula.
pub fn rodrigues(theta: &Vector3<f64>) -> Matrix3<f64> {
    let angle = theta.norm();
    if angle == 0.0 {
        return Matrix3::identity();
    }
    let k = theta / angle;
    let kx = Matrix3::new(0.0, -k.z, k.y, k.z, 0.0, -k.x, -k.y, k.x, 0.0);
    Matrix3::identity() + kx * angle.sin() + kx * kx * (1.0 - angle.cos())
}

fn rigid(r: Matrix3<f64>, t: Vector3<f64>) -> Matrix4<f64> {
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
    m
}

/// World transform of joint `k`, by recursion to the root.
pub fn global_transform(skel: &Skeleton, pose: &Pose, k: usize) -> Matrix4<f64> {
    let joint = &skel.joints()[k];
    let local_r = rodrigues(&pose.thetas[k]);
    match joint.parent {
        None => rigid(local_r, skel.rest_position(k) + pose.root_translation),
        Some(p) => global_transform(skel, pose, p) * rigid(local_r, skel.rest_position(k) - skel.rest_position(p)),
    }
}

/// Rest-to-posed transform of joint `k`.
pub fn skinning_transform(skel: &Skeleton, pose: &Pose, k: usize) -> Matrix4<f64> {
    global_transform(skel, pose, k) * rigid(Matrix3::identity(), -skel.rest_position(k))
}

/// Nearest rotation by SVD.
pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        let mut u2 = u;
        u2.column_mut(2).neg_mut();
        r = u2 * vt;
    }
    r
}

fn random_weights(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Array2<f64> {
    let mut w = Array2::from_shape_fn((n, k), |_| rng.gen_range(0.0..1.0f64).powi(3));
    for mut row in w.rows_mut() {
        let s: f64 = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    w
}

fn random_rotation(rng: &mut ChaCha8Rng) -> UnitQuaternion<f64> {
    UnitQuaternion::from_scaled_axis(Vector3::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)))
}

pub fn rest_pose_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let k = rng.gen_range(1..12);
        let skel = random_skeleton(&mut rng, k);
        let jt = forward_kinematics(&skel, &Pose::rest(k)).map_err(|e| e.to_string())?;
        let n = 50;
        let xs: Vec<Vector3<f64>> = (0..n).map(|_| Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
        let rs: Vec<UnitQuaternion<f64>> = (0..n).map(|_| random_rotation(&mut rng)).collect();
        let w = random_weights(&mut rng, n, k);
        let out = warp_to_observation(&xs, &rs, w.view(), &jt).map_err(|e| e.to_string())?;
        for i in 0..n {
            worst = worst.max((out.positions[i] - xs[i]).amax());
            worst = worst.max((out.rotations[i].to_rotation_matrix().matrix() - rs[i].to_rotation_matrix().matrix()).amax());
        }
    }
    within("20 skeletons x 50 gaussians", worst, TOL)
}

pub fn blend_summation_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let k = 9;
    let skel = random_skeleton(&mut rng, k);
    let pose = random_pose(&mut rng, k);
    let jt = forward_kinematics(&skel, &pose).map_err(|e| e.to_string())?;
    let transforms: Vec<Matrix4<f64>> = (0..k).map(|j| skinning_transform(&skel, &pose, j)).collect();
    let n = 1000;
    let xs: Vec<Vector3<f64>> = (0..n).map(|_| Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
    let rs: Vec<UnitQuaternion<f64>> = (0..n).map(|_| random_rotation(&mut rng)).collect();
    let w = random_weights(&mut rng, n, k);
    let out = warp_to_observation(&xs, &rs, w.view(), &jt).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let mut t = Matrix4::zeros();
        for (j, tj) in transforms.iter().enumerate() {
            t += tj * w[[i, j]];
        }
        let x = t * xs[i].push(1.0);
        worst = worst.max((out.positions[i] - x.xyz()).amax());
        if out.degenerate[i] {
            continue;
        }
        let a: Matrix3<f64> = t.fixed_view::<3, 3>(0, 0).into();
        let want = nearest_rotation(&(a * rs[i].to_rotation_matrix().matrix()));
        worst = worst.max((out.rotations[i].to_rotation_matrix().matrix() - want).amax());
    }
    within("1000 random gaussians", worst, TOL)
}

pub fn partition_of_unity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let k = 9;
    let skel = random_skeleton(&mut rng, k);
    let n = 200;
    let xs: Vec<Vector3<f64>> = (0..n).map(|_| Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
    let bbox = Aabb::from_points(&xs).expect("points").expanded(0.1);
    let mut field = BlendWeightField::new(&skel, &xs, bbox, &BlendFieldConfig::default(), &mut rng);
    for v in field.net.parameters_mut() {
        *v += rng.gen_range(-0.5..0.5);
    }
    let (w, _) = field.forward(&xs).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for (i, row) in w.rows().into_iter().enumerate() {
        if row.iter().any(|&v| v < 0.0) {
            return Err(format!("negative weight at gaussian {i}"));
        }
        worst = worst.max((row.sum() - 1.0).abs());
        let single = field.blend_weights(&xs[i], i).map_err(|e| e.to_string())?;
        worst = worst.max(single.iter().zip(row).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    within("200 gaussians with a perturbed residual network", worst, TOL)
}

pub fn fk_vs_recursion() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let k = rng.gen_range(1..16);
        let skel = random_skeleton(&mut rng, k);
        let pose = random_pose(&mut rng, k);
        let jt = forward_kinematics(&skel, &pose).map_err(|e| e.to_string())?;
        for j in 0..k {
            let g = global_transform(&skel, &pose, j);
            let r: Matrix3<f64> = g.fixed_view::<3, 3>(0, 0).into();
            let t: Vector3<f64> = g.fixed_view::<3, 1>(0, 3).into();
            worst = worst.max((jt.rotations[j] - r).amax());
            worst = worst.max((jt.translations[j] - t).amax());
            worst = worst.max((jt.skinning[j] - skinning_transform(&skel, &pose, j)).amax());
        }
    }
    within("50 random skeletons and poses", worst, TOL)
}
