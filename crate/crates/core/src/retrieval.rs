//! Pose-sequence retrieval of codebook timestamps for novel motion.
//!
//! Each body part is matched independently. The matching key for frame `i`
//! concatenates the per-joint relative rotations `delta(p_{i-1}, p_{i-2})`,
//! `delta(p_i, p_{i-1})` and the absolute joint rotations `p_i`. A query is
//! compared by L2 distance against every training key of the part; the `k`
//! closest form the candidate set, which is filtered by a sliding window
//! around the previously retrieved timestamp. Two in-window candidates are
//! blended by their distances; an empty window falls back to the global best
//! and records a temporal jitter.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::avatar::{CanonicalAvatar, TimeQuery};
use crate::rasterizer::{Camera, RenderSettings, RenderedImage};
use crate::skinning::{assign_gaussian_parts, BodyPart, Pose, PoseTrack, Skeleton};
use crate::{Error, Result};

/// Flattened `{delta_{i-1}, delta_i, p_i}` for one body part.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaPoseSequence {
    pub values: Vec<f64>,
}

impl DeltaPoseSequence {
    pub fn distance(&self, other: &DeltaPoseSequence) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    }
}

/// Axis-angle of `R(prev)^T R(cur)`.
pub fn relative_rotation(cur: &Vector3<f64>, prev: &Vector3<f64>) -> Vector3<f64> {
    (Rotation3::from_scaled_axis(*prev).inverse() * Rotation3::from_scaled_axis(*cur)).scaled_axis()
}

/// Joints matched for `part`. The root's rotation (global orientation) is
/// always matched with the center body.
pub fn matching_joints(skel: &Skeleton, part: BodyPart) -> Vec<usize> {
    let root = skel.root();
    (0..skel.joint_count())
        .filter(|&k| if k == root { part == BodyPart::Cb } else { skel.part(k) == part })
        .collect()
}

/// Parts that have at least one matching joint.
pub fn matching_parts(skel: &Skeleton) -> Vec<BodyPart> {
    BodyPart::ALL.into_iter().filter(|&p| !matching_joints(skel, p).is_empty()).collect()
}

/// Matching key for the last of three consecutive poses.
pub fn delta_pose_sequence(joints: &[usize], p0: &Pose, p1: &Pose, p2: &Pose) -> DeltaPoseSequence {
    let mut values = Vec::with_capacity(joints.len() * 9);
    for &j in joints {
        values.extend_from_slice(relative_rotation(&p1.thetas[j], &p0.thetas[j]).as_slice());
    }
    for &j in joints {
        values.extend_from_slice(relative_rotation(&p2.thetas[j], &p1.thetas[j]).as_slice());
    }
    for &j in joints {
        values.extend_from_slice(p2.thetas[j].as_slice());
    }
    DeltaPoseSequence { values }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub timestamp: usize,
    pub sequence: DeltaPoseSequence,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartIndex {
    pub part: BodyPart,
    pub joints: Vec<usize>,
    pub entries: Vec<IndexEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseSequenceIndex {
    pub parts: Vec<PartIndex>,
}

impl PoseSequenceIndex {
    pub fn part(&self, part: BodyPart) -> Option<&PartIndex> {
        self.parts.iter().find(|p| p.part == part)
    }

    pub fn part_list(&self) -> Vec<BodyPart> {
        self.parts.iter().map(|p| p.part).collect()
    }

    pub fn query(&self, part: BodyPart, p0: &Pose, p1: &Pose, p2: &Pose) -> Result<DeltaPoseSequence> {
        let pi = self.part(part).ok_or_else(|| Error::Usage(format!("index has no part {}", part.as_str())))?;
        Ok(delta_pose_sequence(&pi.joints, p0, p1, p2))
    }
}

fn check_track(skel: &Skeleton, track: &PoseTrack) -> Result<()> {
    if track.len() < 3 {
        return Err(Error::Index(format!("pose track needs at least 3 frames, has {}", track.len())));
    }
    for r in &track.records {
        if r.pose.thetas.len() != skel.joint_count() {
            return Err(Error::JointCountMismatch { expected: skel.joint_count(), got: r.pose.thetas.len() });
        }
        if !r.pose.is_finite() {
            return Err(Error::Domain(format!("pose at frame {} is not finite", r.frame_index)));
        }
    }
    Ok(())
}

pub fn build_index(track: &PoseTrack, skel: &Skeleton) -> Result<PoseSequenceIndex> {
    check_track(skel, track)?;
    if !track.records.windows(2).all(|w| w[0].frame_index < w[1].frame_index) {
        return Err(Error::Index("training frame indices must be strictly increasing".into()));
    }
    let parts = matching_parts(skel)
        .into_iter()
        .map(|part| {
            let joints = matching_joints(skel, part);
            let entries = (2..track.len())
                .map(|i| {
                    let r = &track.records;
                    IndexEntry { timestamp: r[i].frame_index, sequence: delta_pose_sequence(&joints, &r[i - 2].pose, &r[i - 1].pose, &r[i].pose) }
                })
                .collect();
            PartIndex { part, joints, entries }
        })
        .collect();
    Ok(PoseSequenceIndex { parts })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalParams {
    /// Candidate set size.
    pub k: usize,
    /// Sliding window half-width in timestamps (may be infinite).
    pub window: f64,
    /// Average neighbouring features at jitter frames when animating.
    pub smoothing: bool,
}

impl Default for RetrievalParams {
    fn default() -> Self {
        Self { k: 20, window: 3.0, smoothing: true }
    }
}

impl RetrievalParams {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Config("retrieval k must be at least 2".into()));
        }
        if !(self.window >= 1.0) {
            return Err(Error::Config("retrieval window must be at least 1".into()));
        }
        Ok(())
    }

    /// Plain nearest-neighbour search: every entry is a candidate and the
    /// window never excludes any.
    pub fn exhaustive() -> Self {
        Self { k: usize::MAX, window: f64::INFINITY, smoothing: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalState {
    pub params: RetrievalParams,
    history: Vec<(BodyPart, f64)>,
    pub jitter_log: Vec<(usize, BodyPart)>,
    frame: usize,
}

impl RetrievalState {
    pub fn new(params: RetrievalParams) -> Result<Self> {
        params.validate()?;
        Ok(Self { params, history: Vec::new(), jitter_log: Vec::new(), frame: 0 })
    }

    pub fn history(&self, part: BodyPart) -> Option<f64> {
        self.history.iter().find(|(p, _)| *p == part).map(|(_, t)| *t)
    }

    fn set_history(&mut self, part: BodyPart, t: f64) {
        match self.history.iter_mut().find(|(p, _)| *p == part) {
            Some(h) => h.1 = t,
            None => self.history.push((part, t)),
        }
    }

    /// Output frame recorded in the jitter log for subsequent calls.
    pub fn set_frame(&mut self, frame: usize) {
        self.frame = frame;
    }
}

/// Distance-weighted blend of two timestamps: the closer candidate gets the
/// larger weight; two zero distances give the midpoint.
pub fn blend_timestamps(t1: f64, d1: f64, t2: f64, d2: f64) -> f64 {
    let sum = d1 + d2;
    if sum == 0.0 {
        return 0.5 * (t1 + t2);
    }
    d2 / sum * t1 + d1 / sum * t2
}

/// One retrieval step for one part. Returns the timestamp and whether a
/// temporal jitter was recorded.
pub fn retrieve_timestamp(index: &PoseSequenceIndex, state: &mut RetrievalState, query: &DeltaPoseSequence, part: BodyPart) -> Result<(f64, bool)> {
    let pi = index.part(part).ok_or_else(|| Error::Usage(format!("index has no part {}", part.as_str())))?;
    if pi.entries.is_empty() {
        return Err(Error::Usage("retrieval index is empty".into()));
    }
    if pi.entries[0].sequence.values.len() != query.values.len() {
        return Err(Error::Usage(format!("query has {} values, index keys have {}", query.values.len(), pi.entries[0].sequence.values.len())));
    }
    let mut ranked: Vec<(f64, usize)> = pi.entries.iter().map(|e| (e.sequence.distance(query), e.timestamp)).collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    ranked.truncate(state.params.k.min(ranked.len()));

    let (t, jitter) = match state.history(part) {
        None => (ranked[0].1 as f64, false),
        Some(th) => {
            let w = state.params.window;
            let valid: Vec<&(f64, usize)> = ranked.iter().filter(|(_, ts)| (*ts as f64 - th).abs() < w).take(2).collect();
            match valid.as_slice() {
                [a, b] => (blend_timestamps(a.1 as f64, a.0, b.1 as f64, b.0), false),
                [a] => (a.1 as f64, false),
                _ => (ranked[0].1 as f64, true),
            }
        }
    };
    state.set_history(part, t);
    if jitter {
        let frame = state.frame;
        state.jitter_log.push((frame, part));
    }
    Ok((t, jitter))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub frame: usize,
    pub part: BodyPart,
    pub timestamp: f64,
    pub jitter: bool,
    /// Timestamps of the neighbouring output frames, for jitter rows.
    pub smoothing: Option<(f64, f64)>,
}

/// Per output frame and part retrieval results, frame-major.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RetrievalTrace {
    pub rows: Vec<TraceRow>,
}

impl RetrievalTrace {
    pub fn frames(&self) -> Vec<usize> {
        let mut f: Vec<usize> = self.rows.iter().map(|r| r.frame).collect();
        f.dedup();
        f
    }

    pub fn row(&self, frame: usize, part: BodyPart) -> Option<&TraceRow> {
        self.rows.iter().find(|r| r.frame == frame && r.part == part)
    }

    pub fn part_rows(&self, part: BodyPart) -> Vec<&TraceRow> {
        self.rows.iter().filter(|r| r.part == part).collect()
    }

    pub fn jitter_count(&self) -> usize {
        self.rows.iter().filter(|r| r.jitter).count()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("frame,part,timestamp,jitter,t_before,t_after\n");
        for r in &self.rows {
            let (b, a) = match r.smoothing {
                Some((b, a)) => (b.to_string(), a.to_string()),
                None => (String::new(), String::new()),
            };
            let _ = writeln!(s, "{},{},{},{},{},{}", r.frame, r.part.as_str(), r.timestamp, u8::from(r.jitter), b, a);
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let field = |i: usize| rec.get(i).unwrap_or("");
            let bad = |what: &str| Error::Format(format!("bad trace {what}"));
            let smoothing = match (field(4), field(5)) {
                ("", "") => None,
                (b, a) => Some((b.parse().map_err(|_| bad("t_before"))?, a.parse().map_err(|_| bad("t_after"))?)),
            };
            rows.push(TraceRow {
                frame: field(0).parse().map_err(|_| bad("frame"))?,
                part: BodyPart::parse(field(1)).ok_or_else(|| bad("part"))?,
                timestamp: field(2).parse().map_err(|_| bad("timestamp"))?,
                jitter: field(3) == "1",
                smoothing,
            });
        }
        Ok(Self { rows })
    }
}

/// Streams [`retrieve_timestamp`] over a novel track. The first two frames
/// only provide motion history; output frames start at the third record.
pub fn retrieve_track(index: &PoseSequenceIndex, skel: &Skeleton, novel: &PoseTrack, params: RetrievalParams) -> Result<RetrievalTrace> {
    check_track(skel, novel)?;
    let mut state = RetrievalState::new(params)?;
    let parts = index.part_list();
    let mut per_part: Vec<Vec<TraceRow>> = vec![Vec::new(); parts.len()];
    let r = &novel.records;
    for n in 2..r.len() {
        state.set_frame(r[n].frame_index);
        for (pi, &part) in parts.iter().enumerate() {
            let query = index.query(part, &r[n - 2].pose, &r[n - 1].pose, &r[n].pose)?;
            let (timestamp, jitter) = retrieve_timestamp(index, &mut state, &query, part)?;
            per_part[pi].push(TraceRow { frame: r[n].frame_index, part, timestamp, jitter, smoothing: None });
        }
    }
    for rows in &mut per_part {
        let ts: Vec<f64> = rows.iter().map(|r| r.timestamp).collect();
        for (m, row) in rows.iter_mut().enumerate() {
            if !row.jitter {
                continue;
            }
            let before = m.checked_sub(1).map(|i| ts[i]);
            let after = ts.get(m + 1).copied();
            row.smoothing = match (before, after) {
                (Some(b), Some(a)) => Some((b, a)),
                (Some(b), None) => Some((b, b)),
                (None, Some(a)) => Some((a, a)),
                (None, None) => None,
            };
        }
    }
    let frames = per_part.first().map(Vec::len).unwrap_or(0);
    let mut rows = Vec::with_capacity(frames * parts.len());
    for m in 0..frames {
        for part_rows in &per_part {
            rows.push(part_rows[m].clone());
        }
    }
    Ok(RetrievalTrace { rows })
}

/// One rendered animation frame with the per-gaussian time queries used.
#[derive(Debug, Clone)]
pub struct AnimationFrame {
    pub frame: usize,
    pub image: RenderedImage,
    pub queries: Vec<TimeQuery>,
}

/// Renders every output frame of `trace`: each gaussian is decoded at the
/// timestamp retrieved for its body part (averaging neighbouring features at
/// jitter frames when smoothing is on), then warped with the novel pose.
pub fn animate(
    avatar: &CanonicalAvatar,
    trace: &RetrievalTrace,
    novel: &PoseTrack,
    cam: &Camera,
    settings: &RenderSettings,
    smoothing: bool,
) -> Result<Vec<AnimationFrame>> {
    let weights = avatar.blend_weights()?;
    let labels = assign_gaussian_parts(weights.view(), &avatar.skeleton);
    let root_part = BodyPart::Cb;
    let mut frames = Vec::new();
    for frame in trace.frames() {
        let record = novel
            .records
            .iter()
            .find(|r| r.frame_index == frame)
            .ok_or_else(|| Error::Usage(format!("trace frame {frame} missing from pose track")))?;
        let queries: Vec<TimeQuery> = labels
            .iter()
            .map(|&part| {
                let row = trace.row(frame, part).or_else(|| trace.row(frame, root_part)).or_else(|| trace.rows.iter().find(|r| r.frame == frame));
                let row = row.expect("trace has rows for every output frame");
                let norm = |t: f64| avatar.time_range.normalize(t);
                match (smoothing && row.jitter, row.smoothing) {
                    (true, Some((b, a))) => TimeQuery::Mean(norm(b), norm(a)),
                    _ => TimeQuery::At(norm(row.timestamp)),
                }
            })
            .collect();
        let image = avatar.render_queries(&queries, &record.pose, cam, settings)?;
        frames.push(AnimationFrame { frame, image, queries });
    }
    Ok(frames)
}
