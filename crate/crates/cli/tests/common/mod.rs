//! Helpers shared by the CLI tests and the acceptance harness.

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use chronosplat::skinning::{Pose, PoseTrack};

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_chronosplat")
}

pub fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

pub fn run<I, S>(args: I) -> Output
where
    I: IntoIterator<Item = S>,
    S: AsRef<std::ffi::OsStr>,
{
    Command::new(bin()).args(args).output().expect("spawn chronosplat")
}

/// Runs the CLI and panics with its stderr unless it exits 0.
pub fn ok<I, S>(args: I) -> Output
where
    I: IntoIterator<Item = S>,
    S: AsRef<std::ffi::OsStr>,
{
    let out = run(args);
    assert!(out.status.success(), "exit {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr));
    out
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

pub fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

/// Generates the toy dataset under `dir/ds` and returns its path.
pub fn toy_dataset(dir: &Path) -> PathBuf {
    let ds = dir.join("ds");
    ok(["synth", "--spec", p(&config("toy_scene.json")), "--out", p(&ds)]);
    ds
}

/// Trains the toy config on `ds`, returning the archive path.
pub fn toy_avatar(dir: &Path, ds: &Path, name: &str) -> PathBuf {
    let out = dir.join(name);
    ok(["train", "--dataset", p(ds), "--config", p(&config("toy.json")), "--out", p(&out)]);
    out
}

/// Replays `track` in slow motion: output frame `i` holds the pose at
/// fractional frame `start + speed * i`, interpolated linearly between
/// neighbouring records.
pub fn slow_track(track: &PoseTrack, speed: f64, frames: usize, start: f64) -> PoseTrack {
    let poses = (0..frames)
        .map(|i| {
            let x = start + speed * i as f64;
            let (a, f) = (x.floor() as usize, x - x.floor());
            let (pa, pb) = (&track.records[a].pose, &track.records[a + 1].pose);
            Pose {
                thetas: pa.thetas.iter().zip(&pb.thetas).map(|(u, v)| u * (1.0 - f) + v * f).collect(),
                root_translation: pa.root_translation * (1.0 - f) + pb.root_translation * f,
            }
        })
        .collect();
    PoseTrack::from_poses(0, poses)
}
