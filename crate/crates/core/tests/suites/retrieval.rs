use chronosplat::retrieval::{
    blend_timestamps, build_index, retrieve_timestamp, retrieve_track, RetrievalParams, RetrievalState, RetrievalTrace,
};
use chronosplat::skinning::{BodyPart, Pose, PoseRecord, PoseTrack, Skeleton};
use chronosplat::synth::{biped, SynthSceneSpec};
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::skinning::{random_skeleton, rodrigues};
use super::{within, Check, Outcome};

pub const WEIGHT_TOL: f64 = 1e-12;

pub fn checks() -> Vec<Check> {
    vec![
        Check { name: "exhaustive nearest neighbour", run: exhaustive_nearest_neighbour },
        Check { name: "weight formula limits", run: weight_formula_limits },
        Check { name: "window discipline", run: window_discipline },
        Check { name: "self-retrieval", run: self_retrieval },
        Check { name: "determinism", run: determinism },
        Check { name: "per-part independence", run: per_part_independence },
    ]
}

/// Log map of a rotation matrix with angle below pi.
pub fn log_map(r: &Matrix3<f64>) -> Vector3<f64> {
    let cos = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let angle = cos.acos();
    if angle < 1e-12 {
        return Vector3::zeros();
    }
    let v = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    v * (angle / (2.0 * angle.sin()))
}

/// Joints compared for `part`: the root joins the center body.
pub fn oracle_joints(skel: &Skeleton, part: BodyPart) -> Vec<usize> {
    (0..skel.joint_count())
        .filter(|&k| if k == skel.root() { part == BodyPart::Cb } else { skel.part(k) == part })
        .collect()
}

/// Squared key distance between the triples `(a0, a1, a2)` and `(b0, b1, b2)`.
pub fn oracle_distance(joints: &[usize], a: [&Pose; 3], b: [&Pose; 3]) -> f64 {
    let delta = |p: [&Pose; 3], step: usize, j: usize| {
        log_map(&(rodrigues(&p[step - 1].thetas[j]).transpose() * rodrigues(&p[step].thetas[j])))
    };
    let mut d2 = 0.0;
    for &j in joints {
        d2 += (delta(a, 1, j) - delta(b, 1, j)).norm_squared();
        d2 += (delta(a, 2, j) - delta(b, 2, j)).norm_squared();
        d2 += (a[2].thetas[j] - b[2].thetas[j]).norm_squared();
    }
    d2
}

/// Training timestamps of `part` ranked by distance to the query, ties by
/// ascending timestamp.
pub fn oracle_ranking(skel: &Skeleton, track: &PoseTrack, part: BodyPart, query: [&Pose; 3]) -> Vec<(f64, usize)> {
    let joints = oracle_joints(skel, part);
    let r = &track.records;
    let mut ranked: Vec<(f64, usize)> = (2..r.len())
        .map(|i| (oracle_distance(&joints, [&r[i - 2].pose, &r[i - 1].pose, &r[i].pose], query).sqrt(), r[i].frame_index))
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    ranked
}

fn random_pose(rng: &mut ChaCha8Rng, joints: usize, amp: f64) -> Pose {
    Pose {
        thetas: (0..joints).map(|_| Vector3::new(rng.gen_range(-amp..amp), rng.gen_range(-amp..amp), rng.gen_range(-amp..amp))).collect(),
        root_translation: Vector3::new(rng.gen_range(-1.0..1.0), 0.0, 0.0),
    }
}

fn random_track(rng: &mut ChaCha8Rng, joints: usize, len: usize) -> PoseTrack {
    let mut frame = rng.gen_range(0..5);
    let mut poses: Vec<Pose> = (0..len).map(|_| random_pose(rng, joints, 0.8)).collect();
    // Repeated stretches create exact distance ties.
    if len >= 8 && rng.gen_bool(0.5) {
        let src = rng.gen_range(0..len - 6);
        let dst = rng.gen_range(src + 3..len - 2);
        for o in 0..3.min(len - dst) {
            poses[dst + o] = poses[src + o].clone();
        }
    }
    PoseTrack {
        records: poses
            .into_iter()
            .map(|pose| {
                let r = PoseRecord { frame_index: frame, pose };
                frame += rng.gen_range(1..4);
                r
            })
            .collect(),
    }
}

/// Continuous motion: a random walk in joint angles.
fn smooth_track(rng: &mut ChaCha8Rng, joints: usize, len: usize, step: f64) -> PoseTrack {
    let mut pose = random_pose(rng, joints, 0.3);
    let mut poses = Vec::with_capacity(len);
    for _ in 0..len {
        poses.push(pose.clone());
        for t in &mut pose.thetas {
            *t += Vector3::new(rng.gen_range(-step..step), rng.gen_range(-step..step), rng.gen_range(-step..step));
            *t = t.map(|v| v.clamp(-1.0, 1.0));
        }
    }
    PoseTrack::from_poses(0, poses)
}

pub fn exhaustive_nearest_neighbour() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut ties = 0;
    for instance in 0..200 {
        let joints = rng.gen_range(1..10);
        let skel = if instance % 2 == 0 { biped() } else { random_skeleton(&mut rng, joints) };
        let k = skel.joint_count();
        let len = rng.gen_range(3..30);
        let track = random_track(&mut rng, k, len);
        let index = build_index(&track, &skel).map_err(|e| e.to_string())?;
        let query: Vec<Pose> = if rng.gen_bool(0.5) {
            let s = rng.gen_range(0..track.len() - 2);
            track.records[s..s + 3].iter().map(|r| r.pose.clone()).collect()
        } else {
            (0..3).map(|_| random_pose(&mut rng, k, 0.8)).collect()
        };
        for part in index.part_list() {
            let params = RetrievalParams { k: index.part(part).expect("listed").entries.len().max(2), window: f64::INFINITY, smoothing: true };
            let mut state = RetrievalState::new(params).map_err(|e| e.to_string())?;
            let q = index.query(part, &query[0], &query[1], &query[2]).map_err(|e| e.to_string())?;
            let (t, jitter) = retrieve_timestamp(&index, &mut state, &q, part).map_err(|e| e.to_string())?;
            let ranked = oracle_ranking(&skel, &track, part, [&query[0], &query[1], &query[2]]);
            if ranked.len() > 1 && ranked[0].0 == ranked[1].0 {
                ties += 1;
            }
            if jitter || t != ranked[0].1 as f64 {
                return Err(format!("instance {instance} part {}: got {t}, exhaustive scan gives {}", part.as_str(), ranked[0].1));
            }
        }
    }
    Ok(format!("200 instances match exactly ({ties} exact ties resolved to the smaller timestamp)"))
}

/// With an unbounded window every later step blends the two best entries.
pub fn exhaustive_trace_oracle(skel: &Skeleton, train: &PoseTrack, novel: &PoseTrack, trace: &RetrievalTrace) -> Result<(), String> {
    let r = &novel.records;
    for part in BodyPart::ALL.into_iter().filter(|&p| !oracle_joints(skel, p).is_empty()) {
        for n in 2..r.len() {
            let ranked = oracle_ranking(skel, train, part, [&r[n - 2].pose, &r[n - 1].pose, &r[n].pose]);
            let want = if n == 2 || ranked.len() == 1 {
                ranked[0].1 as f64
            } else {
                blend_timestamps(ranked[0].1 as f64, ranked[0].0, ranked[1].1 as f64, ranked[1].0)
            };
            let row = trace.row(r[n].frame_index, part).ok_or_else(|| format!("missing row {} {}", r[n].frame_index, part.as_str()))?;
            if (row.timestamp - want).abs() > 1e-9 || row.jitter {
                return Err(format!("frame {} part {}: got {}, oracle {want}", r[n].frame_index, part.as_str(), row.timestamp));
            }
        }
    }
    Ok(())
}

pub fn weight_formula_limits() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let (t1, t2) = (rng.gen_range(0.0..100.0), rng.gen_range(0.0..100.0));
        let (d1, d2) = (rng.gen_range(0.0..5.0), rng.gen_range(0.0..5.0));
        worst = worst.max((blend_timestamps(t1, 0.0, t2, d2) - t1).abs());
        worst = worst.max((blend_timestamps(t1, d1, t2, d1) - 0.5 * (t1 + t2)).abs());
        worst = worst.max((blend_timestamps(t1, 0.0, t2, 0.0) - 0.5 * (t1 + t2)).abs());
        let t = blend_timestamps(t1, d1, t2, d2);
        if t < t1.min(t2) - WEIGHT_TOL || t > t1.max(t2) + WEIGHT_TOL {
            return Err(format!("blend {t} outside [{t1}, {t2}]"));
        }
    }
    within("d1=0, d1=d2 and bracketing on 1000 draws", worst, WEIGHT_TOL)
}

pub fn window_discipline() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let skel = biped();
    let mut checked = 0;
    for _ in 0..20 {
        let train = smooth_track(&mut rng, skel.joint_count(), 60, 0.15);
        let novel = smooth_track(&mut rng, skel.joint_count(), 40, 0.15);
        let index = build_index(&train, &skel).map_err(|e| e.to_string())?;
        for window in [1.0, 3.0, 7.5] {
            let params = RetrievalParams { k: 20, window, smoothing: true };
            let trace = retrieve_track(&index, &skel, &novel, params).map_err(|e| e.to_string())?;
            for part in index.part_list() {
                let rows = trace.part_rows(part);
                for w in rows.windows(2) {
                    if w[1].jitter {
                        continue;
                    }
                    checked += 1;
                    let dt = (w[1].timestamp - w[0].timestamp).abs();
                    if dt >= window + 1.0 {
                        return Err(format!("step of {dt} at frame {} with window {window}", w[1].frame));
                    }
                }
            }
        }
    }
    Ok(format!("{checked} non-jitter steps stay within W+1"))
}

pub fn self_retrieval() -> Outcome {
    let spec = SynthSceneSpec::default();
    let track = spec.pose_track().slice(0..20);
    let index = build_index(&track, &spec.skeleton).map_err(|e| e.to_string())?;
    let trace = retrieve_track(&index, &spec.skeleton, &track, RetrievalParams::default()).map_err(|e| e.to_string())?;
    for row in &trace.rows {
        if row.jitter || row.timestamp != row.frame as f64 {
            return Err(format!("frame {} part {} retrieved {}", row.frame, row.part.as_str(), row.timestamp));
        }
    }
    Ok(format!("{} rows recover their frame index with no jitter", trace.rows.len()))
}

pub fn determinism() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let skel = biped();
    let train = random_track(&mut rng, skel.joint_count(), 40);
    let novel = smooth_track(&mut rng, skel.joint_count(), 30, 0.4);
    let run = || {
        let index = build_index(&train, &skel).expect("index");
        retrieve_track(&index, &skel, &novel, RetrievalParams { k: 5, window: 2.0, smoothing: true }).expect("trace").to_csv()
    };
    let first = run();
    if (0..4).all(|_| run() == first) {
        Ok(format!("5 runs give byte-identical traces ({} rows)", first.lines().count() - 1))
    } else {
        Err("traces differ between runs".into())
    }
}

pub fn per_part_independence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let skel = biped();
    let train = smooth_track(&mut rng, skel.joint_count(), 50, 0.2);
    let novel = smooth_track(&mut rng, skel.joint_count(), 25, 0.2);
    let index = build_index(&train, &skel).map_err(|e| e.to_string())?;
    let params = RetrievalParams::default();
    let base = retrieve_track(&index, &skel, &novel, params).map_err(|e| e.to_string())?;
    for changed in [BodyPart::La, BodyPart::Rl] {
        let mut edited = novel.clone();
        let joints = oracle_joints(&skel, changed);
        for r in &mut edited.records {
            for &j in &joints {
                r.pose.thetas.swap(j, joints[0]);
                r.pose.thetas[j] += Vector3::new(rng.gen_range(-0.5..0.5), 0.0, rng.gen_range(-0.5..0.5));
            }
        }
        let trace = retrieve_track(&index, &skel, &edited, params).map_err(|e| e.to_string())?;
        for (a, b) in base.rows.iter().zip(&trace.rows) {
            if a.part != changed && a != b {
                return Err(format!("editing part {} changed part {} at frame {}", changed.as_str(), a.part.as_str(), a.frame));
            }
        }
    }
    Ok("editing one part's joints leaves the other parts' rows unchanged".into())
}
