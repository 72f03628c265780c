//! Multi-view dataset directories and pose-track files.
//!
//! Layout:
//! ```text
//! cameras.json              array of cameras, index = view
//! skeleton.json
//! poses.csv                 one row per frame
//! split.json                train/novel frame ranges and view subsets
//! images/view{V}/frame{F}.png
//! gt_gaussians.bin          ground-truth gaussian track (optional)
//! ```

use std::fmt::Write as _;
use std::ops::Range;
use std::path::{Path, PathBuf};

use nalgebra::{UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::binio::{Reader, Writer};
use crate::rasterizer::image_io::{load_png, save_png};
use crate::rasterizer::Camera;
use crate::skinning::{Pose, PoseRecord, PoseTrack, Skeleton};
use crate::trainer::TrainingSample;
use crate::{Error, Result};

/// Pose CSV text: `frame,root_tx,root_ty,root_tz` then `j{k}_x,j{k}_y,j{k}_z`
/// per joint.
pub fn pose_track_csv(track: &PoseTrack) -> String {
    let k = track.records.first().map_or(0, |r| r.pose.thetas.len());
    let mut s = String::from("frame,root_tx,root_ty,root_tz");
    for j in 0..k {
        let _ = write!(s, ",j{j}_x,j{j}_y,j{j}_z");
    }
    s.push('\n');
    for r in &track.records {
        let _ = write!(s, "{}", r.frame_index);
        for v in r.pose.root_translation.iter().chain(r.pose.thetas.iter().flat_map(|t| t.iter())) {
            let _ = write!(s, ",{v:?}");
        }
        s.push('\n');
    }
    s
}

pub fn parse_pose_track(text: &str) -> Result<PoseTrack> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let cols = rdr.headers()?.len();
    if cols < 4 || (cols - 4) % 3 != 0 {
        return Err(Error::Format(format!("pose CSV has {cols} columns; expected 4 + 3 per joint")));
    }
    let joints = (cols - 4) / 3;
    let mut records = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = || Error::Format(format!("pose CSV row {}: unparsable value", line + 1));
        let frame_index: usize = rec.get(0).ok_or_else(bad)?.trim().parse().map_err(|_| bad())?;
        let vals: Vec<f64> = (1..cols).map(|i| rec.get(i).and_then(|s| s.trim().parse().ok()).ok_or_else(bad)).collect::<Result<_>>()?;
        let pose = Pose {
            root_translation: Vector3::new(vals[0], vals[1], vals[2]),
            thetas: (0..joints).map(|j| Vector3::new(vals[3 + 3 * j], vals[4 + 3 * j], vals[5 + 3 * j])).collect(),
        };
        if !pose.is_finite() {
            return Err(Error::Domain(format!("pose CSV row {}: non-finite value", line + 1)));
        }
        records.push(PoseRecord { frame_index, pose });
    }
    Ok(PoseTrack { records })
}

pub fn load_pose_track(path: &Path) -> Result<PoseTrack> {
    parse_pose_track(&std::fs::read_to_string(path)?)
}

pub fn save_pose_track(path: &Path, track: &PoseTrack) -> Result<()> {
    std::fs::write(path, pose_track_csv(track))?;
    Ok(())
}

pub fn load_camera(path: &Path) -> Result<Camera> {
    let cam: Camera = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    cam.validate()?;
    Ok(cam)
}

pub fn save_camera(path: &Path, cam: &Camera) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(cam)?)?;
    Ok(())
}

/// Frame ranges are half-open.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train_frames: Range<usize>,
    pub novel_frames: Range<usize>,
    pub train_views: Vec<usize>,
    pub test_views: Vec<usize>,
}

impl Default for SplitManifest {
    fn default() -> Self {
        Self { train_frames: 0..20, novel_frames: 22..30, train_views: vec![0, 2, 3, 4, 6, 7], test_views: vec![1, 5] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct SampleRef {
    pub view: usize,
    pub frame: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Partition {
    /// Train frames on train views.
    pub train: Vec<SampleRef>,
    /// Train frames on test views.
    pub heldout: Vec<SampleRef>,
    /// Novel frames on test views.
    pub test: Vec<SampleRef>,
}

/// Ground-truth gaussian, canonical space.
#[derive(Debug, Clone, PartialEq)]
pub struct GtGaussian {
    pub position: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
    pub scale: Vector3<f64>,
    pub opacity: f64,
    pub color: [f64; 3],
    pub appendage: bool,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GtFrame {
    pub frame: usize,
    /// Time-dependent canonical offset per gaussian (zero on the body).
    pub offsets: Vec<Vector3<f64>>,
    pub posed_positions: Vec<Vector3<f64>>,
    pub posed_rotations: Vec<UnitQuaternion<f64>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruthTrack {
    pub gaussians: Vec<GtGaussian>,
    pub frames: Vec<GtFrame>,
}

const GT_MAGIC: &[u8; 4] = b"R3GT";
const GT_VERSION: u32 = 1;

impl GroundTruthTrack {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.magic(GT_MAGIC);
        w.u32(GT_VERSION);
        let k = self.gaussians.first().map_or(0, |g| g.weights.len());
        w.u32(self.gaussians.len() as u32);
        w.u32(k as u32);
        w.u32(self.frames.len() as u32);
        for g in &self.gaussians {
            w.f64s(g.position.iter());
            w.f64s(g.rotation.coords.iter());
            w.f64s(g.scale.iter());
            w.f64(g.opacity);
            w.f64s(g.color.iter());
            w.u8(u8::from(g.appendage));
            w.f64s(g.weights.iter());
        }
        for f in &self.frames {
            w.u32(f.frame as u32);
            for i in 0..self.gaussians.len() {
                w.f64s(f.offsets[i].iter());
                w.f64s(f.posed_positions[i].iter());
                w.f64s(f.posed_rotations[i].coords.iter());
            }
        }
        w.buf
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut r = Reader::new(data, "ground-truth track");
        r.expect_magic(GT_MAGIC)?;
        let version = r.u32()?;
        if version != GT_VERSION {
            return Err(Error::Format(format!("ground-truth track version {version} is not supported")));
        }
        let n = r.count(8 * 14)?;
        let k = r.u32()? as usize;
        let frames = r.count(4)?;
        let quat = |v: Vec<f64>| UnitQuaternion::new_unchecked(nalgebra::Quaternion::new(v[3], v[0], v[1], v[2]));
        let v3 = |v: Vec<f64>| Vector3::new(v[0], v[1], v[2]);
        let mut gaussians = Vec::with_capacity(n);
        for _ in 0..n {
            gaussians.push(GtGaussian {
                position: v3(r.f64_vec(3)?),
                rotation: quat(r.f64_vec(4)?),
                scale: v3(r.f64_vec(3)?),
                opacity: r.f64()?,
                color: {
                    let c = r.f64_vec(3)?;
                    [c[0], c[1], c[2]]
                },
                appendage: r.u8()? != 0,
                weights: r.f64_vec(k)?,
            });
        }
        let mut out = Vec::with_capacity(frames);
        for _ in 0..frames {
            let frame = r.u32()? as usize;
            let mut f = GtFrame { frame, offsets: Vec::with_capacity(n), posed_positions: Vec::with_capacity(n), posed_rotations: Vec::with_capacity(n) };
            for _ in 0..n {
                f.offsets.push(v3(r.f64_vec(3)?));
                f.posed_positions.push(v3(r.f64_vec(3)?));
                f.posed_rotations.push(quat(r.f64_vec(4)?));
            }
            out.push(f);
        }
        r.finish()?;
        Ok(Self { gaussians, frames: out })
    }
}

/// Images are interleaved RGB in `[0,1]`, indexed `[view][frame position]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub skeleton: Skeleton,
    pub cameras: Vec<Camera>,
    pub poses: PoseTrack,
    pub images: Vec<Vec<Vec<f64>>>,
    pub split: SplitManifest,
    pub ground_truth: Option<GroundTruthTrack>,
}

fn image_path(dir: &Path, view: usize, frame: usize) -> PathBuf {
    dir.join("images").join(format!("view{view}")).join(format!("frame{frame}.png"))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Validation(format!("cannot read {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

impl Dataset {
    pub fn frame_position(&self, frame: usize) -> Option<usize> {
        self.poses.records.iter().position(|r| r.frame_index == frame)
    }

    pub fn pose(&self, frame: usize) -> Option<&Pose> {
        self.frame_position(frame).map(|i| &self.poses.records[i].pose)
    }

    pub fn image(&self, view: usize, frame: usize) -> Option<&[f64]> {
        let i = self.frame_position(frame)?;
        self.images.get(view)?.get(i).map(Vec::as_slice)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cameras.is_empty() || self.poses.is_empty() {
            return Err(Error::Validation("dataset has no cameras or no frames".into()));
        }
        if self.images.len() != self.cameras.len() {
            return Err(Error::Validation(format!("{} image views for {} cameras", self.images.len(), self.cameras.len())));
        }
        for (v, (cam, frames)) in self.cameras.iter().zip(&self.images).enumerate() {
            cam.validate()?;
            if frames.len() != self.poses.len() {
                return Err(Error::Validation(format!("view {v} has {} images for {} frames", frames.len(), self.poses.len())));
            }
            if frames.iter().any(|im| im.len() != cam.pixel_count() * 3) {
                return Err(Error::Validation(format!("view {v} has an image of the wrong size")));
            }
        }
        for r in &self.poses.records {
            if r.pose.thetas.len() != self.skeleton.joint_count() {
                return Err(Error::JointCountMismatch { expected: self.skeleton.joint_count(), got: r.pose.thetas.len() });
            }
        }
        let views = self.cameras.len();
        if self.split.train_views.iter().chain(&self.split.test_views).any(|&v| v >= views) {
            return Err(Error::Validation("split references a view that does not exist".into()));
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("cameras.json"), serde_json::to_string_pretty(&self.cameras)?)?;
        std::fs::write(dir.join("skeleton.json"), serde_json::to_string_pretty(&self.skeleton)?)?;
        std::fs::write(dir.join("split.json"), serde_json::to_string_pretty(&self.split)?)?;
        save_pose_track(&dir.join("poses.csv"), &self.poses)?;
        for (v, (cam, frames)) in self.cameras.iter().zip(&self.images).enumerate() {
            std::fs::create_dir_all(dir.join("images").join(format!("view{v}")))?;
            for (r, im) in self.poses.records.iter().zip(frames) {
                save_png(&image_path(dir, v, r.frame_index), cam.width, cam.height, im)?;
            }
        }
        if let Some(gt) = &self.ground_truth {
            std::fs::write(dir.join("gt_gaussians.bin"), gt.to_bytes())?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::Validation(format!("dataset directory {} does not exist", dir.display())));
        }
        let cameras: Vec<Camera> = read_json(&dir.join("cameras.json"))?;
        let skeleton: Skeleton = read_json(&dir.join("skeleton.json"))?;
        let split: SplitManifest = if dir.join("split.json").exists() { read_json(&dir.join("split.json"))? } else { SplitManifest::default() };
        let poses = load_pose_track(&dir.join("poses.csv")).map_err(|e| Error::Validation(format!("poses.csv: {e}")))?;
        let mut images = Vec::with_capacity(cameras.len());
        for (v, cam) in cameras.iter().enumerate() {
            let mut frames = Vec::with_capacity(poses.len());
            for r in &poses.records {
                let path = image_path(dir, v, r.frame_index);
                let im = load_png(&path).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
                if (im.width, im.height) != (cam.width, cam.height) {
                    return Err(Error::Validation(format!("{} is {}x{}, camera is {}x{}", path.display(), im.width, im.height, cam.width, cam.height)));
                }
                frames.push(im.data);
            }
            images.push(frames);
        }
        let gt_path = dir.join("gt_gaussians.bin");
        let ground_truth = if gt_path.exists() { Some(GroundTruthTrack::from_bytes(&std::fs::read(gt_path)?)?) } else { None };
        let ds = Self { skeleton, cameras, poses, images, split, ground_truth };
        ds.validate()?;
        Ok(ds)
    }

    /// Frames of the dataset inside `range`.
    pub fn frames_in(&self, range: &Range<usize>) -> Vec<usize> {
        self.poses.records.iter().map(|r| r.frame_index).filter(|f| range.contains(f)).collect()
    }

    pub fn track_in(&self, range: &Range<usize>) -> PoseTrack {
        PoseTrack { records: self.poses.records.iter().filter(|r| range.contains(&r.frame_index)).cloned().collect() }
    }

    pub fn samples(&self, refs: &[SampleRef]) -> Result<Vec<TrainingSample>> {
        refs.iter()
            .map(|s| {
                let image = self.image(s.view, s.frame).ok_or_else(|| Error::Validation(format!("no image for view {} frame {}", s.view, s.frame)))?;
                Ok(TrainingSample {
                    frame: s.frame,
                    view: s.view,
                    pose: self.pose(s.frame).expect("image implies pose").clone(),
                    camera: self.cameras[s.view].clone(),
                    image: image.to_vec(),
                })
            })
            .collect()
    }
}

/// Partition of `dataset` by frame ranges and view subsets.
pub fn split(dataset: &Dataset, train_frames: Range<usize>, novel_frames: Range<usize>, train_views: &[usize], test_views: &[usize]) -> Result<Partition> {
    let views = dataset.cameras.len();
    if train_views.iter().chain(test_views).any(|&v| v >= views) {
        return Err(Error::Validation(format!("view index out of range (dataset has {views} views)")));
    }
    let pairs = |frames: &[usize], vs: &[usize]| -> Vec<SampleRef> { vs.iter().flat_map(|&view| frames.iter().map(move |&frame| SampleRef { view, frame })).collect() };
    let train_f = dataset.frames_in(&train_frames);
    let part = Partition {
        train: pairs(&train_f, train_views),
        heldout: pairs(&train_f, test_views),
        test: pairs(&dataset.frames_in(&novel_frames), test_views),
    };
    if part.train.is_empty() {
        return Err(Error::Validation("train split is empty".into()));
    }
    Ok(part)
}

impl Dataset {
    /// Partition using the stored split manifest.
    pub fn partition(&self) -> Result<Partition> {
        let s = &self.split;
        split(self, s.train_frames.clone(), s.novel_frames.clone(), &s.train_views, &s.test_views)
    }
}
