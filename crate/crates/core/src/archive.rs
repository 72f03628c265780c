//! Single-file avatar archive.
//!
//! Container: `"R3AV"`, `u32` version, `u32` section count, then per section
//! a `u64` byte length followed by the section. Every section starts with
//! its own four-byte magic and a `u32` version. Learned parameters are
//! stored as little-endian `f32`; configuration scalars that are not
//! learned live in the metadata JSON.
//!
//! | magic | content |
//! |-------|---------|
//! | R3CB  | codebook planes |
//! | R3GD  | decoder MLP |
//! | R3SH  | colour coefficients |
//! | R3XC  | base positions, `u32` count + `f32` triples |
//! | R3BW  | blend-weight base logits and residual MLP |
//! | R3OB  | per-gaussian opacity bias |
//! | R3SK  | skeleton JSON |
//! | R3MD  | metadata JSON (bbox, time range, decoder limits, training poses) |
//! | R3OS  | optimizer state, optional, `f64` |

use std::path::Path;

use nalgebra::Vector3;
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::avatar::CanonicalAvatar;
use crate::binio::{Reader, Writer};
use crate::dataset::{parse_pose_track, pose_track_csv};
use crate::decoder::{DecoderNetwork, GaussianColorStore};
use crate::hexplane::{AxisPair, FeaturePlane, HexPlaneCodebook, ScaleLevel};
use crate::math::{Aabb, TimeRange};
use crate::nn::{Dense, Mlp};
use crate::skinning::{BlendWeightField, Skeleton};
use crate::trainer::{Moments, Optimizer};
use crate::{Error, Result};

pub const ARCHIVE_VERSION: u32 = 1;
const SECTION_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"R3AV";

#[derive(Debug, Clone, PartialEq)]
pub struct AvatarArchive {
    pub avatar: CanonicalAvatar,
    pub optimizer: Option<Optimizer>,
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    bbox: Aabb,
    time_range: TimeRange,
    max_offset: f64,
    max_scale: f64,
    training_poses: String,
}

fn section(magic: &[u8; 4], body: impl FnOnce(&mut Writer)) -> Vec<u8> {
    let mut w = Writer::default();
    w.magic(magic);
    w.u32(SECTION_VERSION);
    body(&mut w);
    w.buf
}

fn write_mlp(w: &mut Writer, mlp: &Mlp) {
    w.u32(mlp.layers.len() as u32);
    for l in &mlp.layers {
        w.u32(l.in_dim() as u32);
        w.u32(l.out_dim() as u32);
        w.f32s(l.weight.iter());
        w.f32s(l.bias.iter());
    }
}

fn read_mlp(r: &mut Reader) -> Result<Mlp> {
    let n = r.count(8)?;
    let mut layers = Vec::with_capacity(n);
    for _ in 0..n {
        let i = r.u32()? as usize;
        let o = r.u32()? as usize;
        if i.saturating_mul(o).saturating_mul(4) > r.remaining() {
            return Err(Error::Format("layer size exceeds the section".into()));
        }
        let weight = Array2::from_shape_vec((o, i), r.f32_vec(o * i)?).expect("shape");
        let bias = Array1::from(r.f32_vec(o)?);
        layers.push(Dense { weight, bias });
    }
    for w in layers.windows(2) {
        if w[0].out_dim() != w[1].in_dim() {
            return Err(Error::Format("MLP layer widths do not chain".into()));
        }
    }
    Ok(Mlp { layers })
}

fn json_section(magic: &[u8; 4], text: &str) -> Vec<u8> {
    section(magic, |w| {
        w.u64(text.len() as u64);
        w.bytes(text.as_bytes());
    })
}

fn read_json_text(r: &mut Reader) -> Result<String> {
    let n = r.u64()? as usize;
    if n > r.remaining() {
        return Err(Error::Format("embedded JSON length exceeds the section".into()));
    }
    String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::Format("embedded JSON is not UTF-8".into()))
}

fn moments(w: &mut Writer, m: &Moments) {
    w.u64(m.m.len() as u64);
    w.f64s(m.m.iter());
    w.f64s(m.v.iter());
}

fn read_moments(r: &mut Reader) -> Result<Moments> {
    let n = r.u64()? as usize;
    if n.saturating_mul(16) > r.remaining() {
        return Err(Error::Format("optimizer moments exceed the section".into()));
    }
    Ok(Moments { m: r.f64_vec(n)?, v: r.f64_vec(n)? })
}

pub fn to_bytes(avatar: &CanonicalAvatar, optimizer: Option<&Optimizer>) -> Result<Vec<u8>> {
    avatar.validate()?;
    let cb = &avatar.codebook;
    let mut sections = vec![
        section(b"R3CB", |w| {
            w.u32(cb.scales.len() as u32);
            for s in &cb.scales {
                w.u32(s.resolution as u32);
                w.u32(s.resolution as u32);
                w.u32(s.time_resolution as u32);
                w.u32(s.channels as u32);
                for p in &s.planes {
                    w.f32s(p.data.iter());
                }
            }
        }),
        section(b"R3GD", |w| write_mlp(w, &avatar.decoder.mlp)),
        section(b"R3SH", |w| {
            w.u32(avatar.colors.degree as u32);
            w.u32(avatar.colors.len() as u32);
            w.f32s(avatar.colors.coeffs.iter());
        }),
        section(b"R3XC", |w| {
            w.u32(avatar.len() as u32);
            w.f32s(avatar.positions.iter().flat_map(|p| p.iter()));
        }),
        section(b"R3BW", |w| {
            w.u32(avatar.blend.len() as u32);
            w.u32(avatar.blend.joint_count() as u32);
            w.f32s(avatar.blend.base_logits.iter());
            write_mlp(w, &avatar.blend.net);
        }),
        section(b"R3OB", |w| {
            w.u32(avatar.len() as u32);
            w.f32s(avatar.opacity_bias.iter());
        }),
        json_section(b"R3SK", &serde_json::to_string(&avatar.skeleton)?),
        json_section(
            b"R3MD",
            &serde_json::to_string(&Metadata {
                bbox: avatar.bbox,
                time_range: avatar.time_range,
                max_offset: avatar.decoder.max_offset,
                max_scale: avatar.decoder.max_scale,
                training_poses: pose_track_csv(&avatar.training_track),
            })?,
        ),
    ];
    if let Some(opt) = optimizer {
        sections.push(section(b"R3OS", |w| {
            w.u64(opt.step);
            for (_, m) in opt.groups() {
                moments(w, m);
            }
        }));
    }
    let mut w = Writer::default();
    w.magic(MAGIC);
    w.u32(ARCHIVE_VERSION);
    w.u32(sections.len() as u32);
    for s in sections {
        w.u64(s.len() as u64);
        w.bytes(&s);
    }
    Ok(w.buf)
}

#[derive(Default)]
struct Parts {
    codebook: Option<(Vec<usize>, usize, usize, Vec<Vec<Vec<f64>>>)>,
    decoder: Option<Mlp>,
    colors: Option<GaussianColorStore>,
    positions: Option<Vec<Vector3<f64>>>,
    blend: Option<(Array2<f64>, Mlp)>,
    opacity_bias: Option<Vec<f64>>,
    skeleton: Option<Skeleton>,
    metadata: Option<Metadata>,
    optimizer: Option<Optimizer>,
}

fn parse_section(data: &[u8], parts: &mut Parts) -> Result<()> {
    let mut r = Reader::new(data, "archive section");
    let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
    let version = r.u32()?;
    let name = String::from_utf8_lossy(&magic).into_owned();
    if version != SECTION_VERSION {
        return Err(Error::Format(format!("section {name} has unsupported version {version}")));
    }
    let duplicate = || Error::Format(format!("duplicate section {name}"));
    match &magic {
        b"R3CB" => {
            let scales = r.count(16)?;
            let mut shape: Option<(usize, usize)> = None;
            let mut res = Vec::with_capacity(scales);
            let mut data = Vec::with_capacity(scales);
            for _ in 0..scales {
                let n = r.u32()? as usize;
                if r.u32()? as usize != n {
                    return Err(Error::Format("codebook spatial planes must be square".into()));
                }
                let tres = r.u32()? as usize;
                let channels = r.u32()? as usize;
                if *shape.get_or_insert((tres, channels)) != (tres, channels) {
                    return Err(Error::Format("codebook scales disagree on time resolution or channels".into()));
                }
                let mut planes = Vec::with_capacity(6);
                for ap in AxisPair::ALL {
                    let len = n.saturating_mul(if ap.is_temporal() { tres } else { n }).saturating_mul(channels);
                    if len.saturating_mul(4) > r.remaining() {
                        return Err(Error::Format("codebook plane exceeds the section".into()));
                    }
                    planes.push(r.f32_vec(len)?);
                }
                res.push(n);
                data.push(planes);
            }
            let (tres, channels) = shape.unwrap_or((0, 0));
            if parts.codebook.replace((res, channels, tres, data)).is_some() {
                return Err(duplicate());
            }
        }
        b"R3GD" => {
            if parts.decoder.replace(read_mlp(&mut r)?).is_some() {
                return Err(duplicate());
            }
        }
        b"R3SH" => {
            let degree = r.u32()? as usize;
            let n = r.u32()? as usize;
            let per = GaussianColorStore::coeffs_for(degree.min(3));
            let count = n.checked_mul(per).filter(|c| c.saturating_mul(4) <= r.remaining()).ok_or_else(|| Error::Format("colour store exceeds the section".into()))?;
            let mut store = GaussianColorStore::new(degree, n)?;
            store.coeffs = r.f32_vec(count)?;
            if parts.colors.replace(store).is_some() {
                return Err(duplicate());
            }
        }
        b"R3XC" => {
            let n = r.count(12)?;
            let v = r.f32_vec(n * 3)?;
            if parts.positions.replace(v.chunks(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect()).is_some() {
                return Err(duplicate());
            }
        }
        b"R3BW" => {
            let n = r.u32()? as usize;
            let k = r.u32()? as usize;
            if n.saturating_mul(k).saturating_mul(4) > r.remaining() {
                return Err(Error::Format("blend logits exceed the section".into()));
            }
            let logits = Array2::from_shape_vec((n, k), r.f32_vec(n * k)?).expect("shape");
            if parts.blend.replace((logits, read_mlp(&mut r)?)).is_some() {
                return Err(duplicate());
            }
        }
        b"R3OB" => {
            let n = r.count(4)?;
            if parts.opacity_bias.replace(r.f32_vec(n)?).is_some() {
                return Err(duplicate());
            }
        }
        b"R3SK" => {
            let s: Skeleton = serde_json::from_str(&read_json_text(&mut r)?)?;
            if parts.skeleton.replace(s).is_some() {
                return Err(duplicate());
            }
        }
        b"R3MD" => {
            let m: Metadata = serde_json::from_str(&read_json_text(&mut r)?)?;
            if parts.metadata.replace(m).is_some() {
                return Err(duplicate());
            }
        }
        b"R3OS" => {
            let step = r.u64()?;
            let mut groups = Vec::with_capacity(7);
            for _ in 0..7 {
                groups.push(read_moments(&mut r)?);
            }
            let mut it = groups.into_iter();
            let mut next = || it.next().expect("seven groups");
            let opt = Optimizer {
                step,
                planes: next(),
                decoder: next(),
                sh: next(),
                positions: next(),
                blend_logits: next(),
                blend_net: next(),
                opacity_bias: next(),
            };
            if parts.optimizer.replace(opt).is_some() {
                return Err(duplicate());
            }
        }
        _ => return Err(Error::Format(format!("unknown archive section {name}"))),
    }
    r.finish()
}

pub fn from_bytes(data: &[u8]) -> Result<AvatarArchive> {
    let mut r = Reader::new(data, "avatar archive");
    if r.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Format("not an avatar archive".into()));
    }
    let version = r.u32()?;
    if version != ARCHIVE_VERSION {
        return Err(Error::Format(format!("archive version {version} is not supported (expected {ARCHIVE_VERSION})")));
    }
    let count = r.count(8)?;
    let mut parts = Parts::default();
    for _ in 0..count {
        let len = r.u64()? as usize;
        if len > r.remaining() {
            return Err(Error::Format("section length exceeds the archive".into()));
        }
        parse_section(r.take(len)?, &mut parts)?;
    }
    r.finish()?;
    let missing = |name: &str| Error::Format(format!("archive lacks section {name}"));
    let meta = parts.metadata.ok_or_else(|| missing("R3MD"))?;
    let (res, channels, tres, data) = parts.codebook.ok_or_else(|| missing("R3CB"))?;
    let scales = res
        .iter()
        .zip(data)
        .map(|(&n, planes)| ScaleLevel {
            resolution: n,
            time_resolution: tres,
            channels,
            planes: AxisPair::ALL
                .iter()
                .zip(planes)
                .map(|(&ap, data)| FeaturePlane { axis_pair: ap, width: n, height: if ap.is_temporal() { tres } else { n }, channels, data })
                .collect(),
        })
        .collect();
    let codebook = HexPlaneCodebook { scales, channels, bbox: meta.bbox, time_range: meta.time_range };
    let (base_logits, net) = parts.blend.ok_or_else(|| missing("R3BW"))?;
    let avatar = CanonicalAvatar {
        positions: parts.positions.ok_or_else(|| missing("R3XC"))?,
        colors: parts.colors.ok_or_else(|| missing("R3SH"))?,
        opacity_bias: parts.opacity_bias.ok_or_else(|| missing("R3OB"))?,
        codebook,
        decoder: DecoderNetwork { mlp: parts.decoder.ok_or_else(|| missing("R3GD"))?, max_offset: meta.max_offset, max_scale: meta.max_scale },
        blend: BlendWeightField { base_logits, net, bbox: meta.bbox },
        skeleton: parts.skeleton.ok_or_else(|| missing("R3SK"))?,
        bbox: meta.bbox,
        time_range: meta.time_range,
        training_track: parse_pose_track(&meta.training_poses)?,
    };
    avatar.validate().map_err(|e| Error::Format(format!("inconsistent archive: {e}")))?;
    if avatar.decoder.mlp.out_dim() != crate::decoder::RAW_DIM || avatar.blend.net.in_dim() != 3 {
        return Err(Error::Format("inconsistent archive: network shapes".into()));
    }
    if let Some(opt) = &parts.optimizer {
        let fresh = Optimizer::new(&avatar);
        if fresh.groups().iter().zip(opt.groups()).any(|((_, a), (_, b))| a.m.len() != b.m.len()) {
            return Err(Error::Format("optimizer state does not match the avatar".into()));
        }
    }
    Ok(AvatarArchive { avatar, optimizer: parts.optimizer })
}

pub fn save(path: &Path, avatar: &CanonicalAvatar, optimizer: Option<&Optimizer>) -> Result<()> {
    std::fs::write(path, to_bytes(avatar, optimizer)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<AvatarArchive> {
    from_bytes(&std::fs::read(path)?)
}
