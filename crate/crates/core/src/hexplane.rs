//! Multi-scale hex-plane spatio-temporal codebook.
//!
//! Six axis-aligned feature planes per scale (`xy, xz, yz, xt, yt, zt`) are
//! sampled bilinearly at the query's two relevant coordinates. The six
//! channel vectors are multiplied elementwise and the per-scale products are
//! concatenated in ascending resolution order.
//!
//! Positions are normalized by the canonical bounding box and clamped to it;
//! time is already normalized to `[0,1]` by the caller (see
//! [`HexPlaneCodebook::normalized_time`]). Grid nodes sit on the boundaries,
//! so a plane with `n` cells along an axis has node spacing `1/(n-1)`.

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::math::{Aabb, TimeRange};
use crate::{Error, Result};

/// Which pair of the `(x, y, z, t)` coordinates a plane is indexed by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AxisPair {
    Xy,
    Xz,
    Yz,
    Xt,
    Yt,
    Zt,
}

impl AxisPair {
    /// Storage and archive order.
    pub const ALL: [AxisPair; 6] = [AxisPair::Xy, AxisPair::Xz, AxisPair::Yz, AxisPair::Xt, AxisPair::Yt, AxisPair::Zt];

    /// Coordinate indices `(column axis, row axis)`; 3 denotes time.
    pub fn axes(self) -> (usize, usize) {
        match self {
            AxisPair::Xy => (0, 1),
            AxisPair::Xz => (0, 2),
            AxisPair::Yz => (1, 2),
            AxisPair::Xt => (0, 3),
            AxisPair::Yt => (1, 3),
            AxisPair::Zt => (2, 3),
        }
    }

    pub fn is_temporal(self) -> bool {
        self.axes().1 == 3
    }
}

/// Dense `height x width x channels` grid, row-major with channels contiguous
/// per node.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePlane {
    pub axis_pair: AxisPair,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeaturePlane {
    pub fn filled(axis_pair: AxisPair, width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self { axis_pair, width, height, channels, data: vec![value; width * height * channels] }
    }

    pub fn node_count(&self) -> usize {
        self.width * self.height
    }

    pub fn node(&self, row: usize, col: usize) -> &[f64] {
        let o = (row * self.width + col) * self.channels;
        &self.data[o..o + self.channels]
    }

    pub fn node_mut(&mut self, row: usize, col: usize) -> &mut [f64] {
        let o = (row * self.width + col) * self.channels;
        &mut self.data[o..o + self.channels]
    }
}

/// One resolution level: square spatial planes plus temporal planes with a
/// fixed time resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleLevel {
    pub resolution: usize,
    pub time_resolution: usize,
    pub channels: usize,
    pub planes: Vec<FeaturePlane>,
}

impl ScaleLevel {
    pub fn filled(resolution: usize, time_resolution: usize, channels: usize, value: f64) -> Self {
        let planes = AxisPair::ALL
            .iter()
            .map(|&ap| {
                let height = if ap.is_temporal() { time_resolution } else { resolution };
                FeaturePlane::filled(ap, resolution, height, channels, value)
            })
            .collect();
        Self { resolution, time_resolution, channels, planes }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodebookConfig {
    pub resolutions: Vec<usize>,
    pub time_resolution: usize,
    pub channels: usize,
    /// Entries start uniform in `[1 - init_spread, 1 + init_spread]`.
    pub init_spread: f64,
}

impl Default for CodebookConfig {
    fn default() -> Self {
        Self { resolutions: vec![64, 128, 256], time_resolution: 50, channels: 32, init_spread: 0.1 }
    }
}

/// Encoder output: `scales x channels` values.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatioTemporalFeature {
    pub values: Vec<f64>,
}

impl SpatioTemporalFeature {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HexPlaneCodebook {
    pub scales: Vec<ScaleLevel>,
    pub channels: usize,
    pub bbox: Aabb,
    pub time_range: TimeRange,
}

/// Gradient contribution for one grid node of one plane.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeGradient {
    pub scale: usize,
    pub plane: AxisPair,
    pub row: usize,
    pub col: usize,
    pub values: Vec<f64>,
}

/// Result of [`HexPlaneCodebook::encode_gradient`].
#[derive(Debug, Clone, PartialEq)]
pub struct EncodeGradient {
    pub nodes: Vec<NodeGradient>,
    pub position: Vector3<f64>,
    pub time: f64,
}

/// One bilinear lookup: the four node indices with their weights, plus the
/// fractional-coordinate derivatives of the weights.
#[derive(Debug, Clone, Copy)]
struct Stencil {
    nodes: [usize; 4],
    weights: [f64; 4],
    frac: [f64; 2],
    /// d(cell coordinate)/d(input coordinate) per axis; zero when clamped.
    scale: [f64; 2],
}

fn axis_lookup(u: f64, n: usize) -> (usize, f64, f64) {
    let inside = (0.0..=1.0).contains(&u);
    let c = u.clamp(0.0, 1.0) * (n - 1) as f64;
    let i0 = (c.floor() as usize).min(n - 2);
    (i0, c - i0 as f64, if inside { (n - 1) as f64 } else { 0.0 })
}

fn stencil(plane: &FeaturePlane, a: f64, b: f64) -> Stencil {
    let (c0, fa, sa) = axis_lookup(a, plane.width);
    let (r0, fb, sb) = axis_lookup(b, plane.height);
    let w = plane.width;
    Stencil {
        nodes: [r0 * w + c0, r0 * w + c0 + 1, (r0 + 1) * w + c0, (r0 + 1) * w + c0 + 1],
        weights: [(1.0 - fa) * (1.0 - fb), fa * (1.0 - fb), (1.0 - fa) * fb, fa * fb],
        frac: [fa, fb],
        scale: [sa, sb],
    }
}

fn gather(plane: &FeaturePlane, st: &Stencil, out: &mut [f64]) {
    let ch = plane.channels;
    out.iter_mut().for_each(|v| *v = 0.0);
    for (node, w) in st.nodes.iter().zip(st.weights) {
        let src = &plane.data[node * ch..(node + 1) * ch];
        for (o, s) in out.iter_mut().zip(src) {
            *o += w * s;
        }
    }
}

fn check_query(x: &Vector3<f64>, t: f64) -> Result<()> {
    if !(x.iter().all(|v| v.is_finite()) && t.is_finite()) {
        return Err(Error::Domain(format!("non-finite codebook query ({}, {}, {}, t={t})", x.x, x.y, x.z)));
    }
    Ok(())
}

impl HexPlaneCodebook {
    /// Codebook with every entry equal to `value`.
    pub fn filled(config: &CodebookConfig, bbox: Aabb, time_range: TimeRange, value: f64) -> Result<Self> {
        if config.resolutions.is_empty() || config.channels == 0 {
            return Err(Error::Config("codebook needs at least one scale and one channel".into()));
        }
        if config.resolutions.iter().any(|&r| r < 2) || config.time_resolution < 2 {
            return Err(Error::Config("plane resolutions must be at least 2".into()));
        }
        if !config.resolutions.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config("scale resolutions must be strictly ascending".into()));
        }
        let scales = config
            .resolutions
            .iter()
            .map(|&r| ScaleLevel::filled(r, config.time_resolution, config.channels, value))
            .collect();
        Ok(Self { scales, channels: config.channels, bbox, time_range })
    }

    /// Entries uniform in `[1 - spread, 1 + spread]`.
    pub fn random<R: Rng>(config: &CodebookConfig, bbox: Aabb, time_range: TimeRange, rng: &mut R) -> Result<Self> {
        let mut cb = Self::filled(config, bbox, time_range, 1.0)?;
        let spread = config.init_spread;
        if spread > 0.0 {
            for v in cb.entries_mut() {
                *v = rng.gen_range(1.0 - spread..=1.0 + spread);
            }
        }
        Ok(cb)
    }

    pub fn feature_dim(&self) -> usize {
        self.scales.len() * self.channels
    }

    pub fn entries_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.scales.iter_mut().flat_map(|s| s.planes.iter_mut().flat_map(|p| p.data.iter_mut()))
    }

    pub fn entry_count(&self) -> usize {
        self.scales.iter().map(|s| s.planes.iter().map(|p| p.data.len()).sum::<usize>()).sum()
    }

    pub fn normalized_time(&self, frame: f64) -> f64 {
        self.time_range.normalize(frame)
    }

    fn coords(&self, x: &Vector3<f64>, t: f64) -> [f64; 4] {
        let u = self.bbox.normalize(x);
        [u.x, u.y, u.z, t]
    }

    pub fn encode(&self, x: &Vector3<f64>, t: f64) -> Result<SpatioTemporalFeature> {
        let mut values = vec![0.0; self.feature_dim()];
        self.encode_into(x, t, &mut values)?;
        Ok(SpatioTemporalFeature { values })
    }

    /// Writes the feature for `(x, t)` into `out` (length [`Self::feature_dim`]).
    pub fn encode_into(&self, x: &Vector3<f64>, t: f64, out: &mut [f64]) -> Result<()> {
        check_query(x, t)?;
        let q = self.coords(x, t);
        let ch = self.channels;
        let mut sample = vec![0.0; ch];
        for (s, level) in self.scales.iter().enumerate() {
            let dst = &mut out[s * ch..(s + 1) * ch];
            dst.iter_mut().for_each(|v| *v = 1.0);
            for plane in &level.planes {
                let (a, b) = plane.axis_pair.axes();
                let st = stencil(plane, q[a], q[b]);
                gather(plane, &st, &mut sample);
                for (d, v) in dst.iter_mut().zip(&sample) {
                    *d *= v;
                }
            }
        }
        Ok(())
    }

    /// Mean of the features at two normalized times.
    pub fn encode_smoothed(&self, x: &Vector3<f64>, t_before: f64, t_after: f64) -> Result<SpatioTemporalFeature> {
        let a = self.encode(x, t_before)?;
        let b = self.encode(x, t_after)?;
        Ok(SpatioTemporalFeature { values: a.values.iter().zip(&b.values).map(|(p, q)| 0.5 * (p + q)).collect() })
    }

    /// Reverse pass of [`Self::encode`]. `sink(scale, plane, node, grad)`
    /// receives each node's channel gradient; the position and time
    /// gradients are returned.
    pub fn backward_with<F>(&self, x: &Vector3<f64>, t: f64, upstream: &[f64], mut sink: F) -> Result<(Vector3<f64>, f64)>
    where
        F: FnMut(usize, usize, usize, &[f64]),
    {
        check_query(x, t)?;
        if upstream.len() != self.feature_dim() {
            return Err(Error::Config(format!("upstream gradient has {} entries, expected {}", upstream.len(), self.feature_dim())));
        }
        let q = self.coords(x, t);
        let ch = self.channels;
        let mut dcoord = [0.0f64; 4];
        let mut samples = vec![vec![0.0; ch]; 6];
        let mut node_grad = vec![0.0; ch];
        let mut dv = vec![0.0; ch];
        for (s, level) in self.scales.iter().enumerate() {
            let up = &upstream[s * ch..(s + 1) * ch];
            let stencils: Vec<Stencil> = level
                .planes
                .iter()
                .map(|plane| {
                    let (a, b) = plane.axis_pair.axes();
                    stencil(plane, q[a], q[b])
                })
                .collect();
            for (p, plane) in level.planes.iter().enumerate() {
                gather(plane, &stencils[p], &mut samples[p]);
            }
            for (p, plane) in level.planes.iter().enumerate() {
                // product of the other five planes, per channel
                for c in 0..ch {
                    let others: f64 = (0..6).filter(|&o| o != p).map(|o| samples[o][c]).product();
                    dv[c] = up[c] * others;
                }
                let st = &stencils[p];
                for (node, w) in st.nodes.iter().zip(st.weights) {
                    for (g, d) in node_grad.iter_mut().zip(&dv) {
                        *g = w * d;
                    }
                    sink(s, p, *node, &node_grad);
                }
                // coordinate derivatives through the bilinear weights
                let [fa, fb] = st.frac;
                let n = st.nodes;
                let (mut da, mut db) = (0.0, 0.0);
                for c in 0..ch {
                    let p00 = plane.data[n[0] * ch + c];
                    let p10 = plane.data[n[1] * ch + c];
                    let p01 = plane.data[n[2] * ch + c];
                    let p11 = plane.data[n[3] * ch + c];
                    da += dv[c] * ((1.0 - fb) * (p10 - p00) + fb * (p11 - p01));
                    db += dv[c] * ((1.0 - fa) * (p01 - p00) + fa * (p11 - p10));
                }
                let (a, b) = plane.axis_pair.axes();
                dcoord[a] += da * st.scale[0];
                dcoord[b] += db * st.scale[1];
            }
        }
        let e = self.bbox.extent();
        Ok((Vector3::new(dcoord[0] / e.x, dcoord[1] / e.y, dcoord[2] / e.z), dcoord[3]))
    }

    /// Gradients of `<upstream, encode(x, t)>` with respect to plane entries,
    /// the canonical position and the normalized time.
    pub fn encode_gradient(&self, x: &Vector3<f64>, t: f64, upstream: &[f64]) -> Result<EncodeGradient> {
        let mut nodes = Vec::new();
        let (position, time) = self.backward_with(x, t, upstream, |s, p, node, g| {
            let plane = &self.scales[s].planes[p];
            nodes.push(NodeGradient {
                scale: s,
                plane: plane.axis_pair,
                row: node / plane.width,
                col: node % plane.width,
                values: g.to_vec(),
            });
        })?;
        Ok(EncodeGradient { nodes, position, time })
    }

    /// Second-difference penalty along time on the temporal planes, averaged
    /// per plane and scaled by `weight`. Accumulates its gradient into `grad`
    /// when given.
    pub fn temporal_smoothness(&self, weight: f64, mut grad: Option<&mut CodebookGradient>) -> f64 {
        if weight == 0.0 {
            return 0.0;
        }
        let mut total = 0.0;
        for (s, level) in self.scales.iter().enumerate() {
            for (p, plane) in level.planes.iter().enumerate() {
                if !plane.axis_pair.is_temporal() || plane.height < 3 {
                    continue;
                }
                let (w, ch) = (plane.width, plane.channels);
                let count = ((plane.height - 2) * w * ch) as f64;
                let k = weight / count;
                let mut plane_grad = grad.as_deref_mut().map(|g| g.plane_mut(s, p));
                for r in 1..plane.height - 1 {
                    for col in 0..w {
                        for c in 0..ch {
                            let at = |row: usize| plane.data[(row * w + col) * ch + c];
                            let d2 = at(r - 1) - 2.0 * at(r) + at(r + 1);
                            total += k * d2 * d2;
                            if let Some(g) = plane_grad.as_mut() {
                                let gd = 2.0 * k * d2;
                                g.add_entry((r - 1) * w + col, c, gd);
                                g.add_entry(r * w + col, c, -2.0 * gd);
                                g.add_entry((r + 1) * w + col, c, gd);
                            }
                        }
                    }
                }
            }
        }
        total
    }
}

/// Dense gradient buffer for one plane that remembers which nodes were hit.
#[derive(Debug, Clone)]
pub struct PlaneGradient {
    pub channels: usize,
    pub values: Vec<f64>,
    touched: Vec<bool>,
    touched_nodes: Vec<usize>,
}

impl PlaneGradient {
    fn new(plane: &FeaturePlane) -> Self {
        Self {
            channels: plane.channels,
            values: vec![0.0; plane.data.len()],
            touched: vec![false; plane.node_count()],
            touched_nodes: Vec::new(),
        }
    }

    fn mark(&mut self, node: usize) {
        if !self.touched[node] {
            self.touched[node] = true;
            self.touched_nodes.push(node);
        }
    }

    pub fn add_node(&mut self, node: usize, grad: &[f64]) {
        self.mark(node);
        let o = node * self.channels;
        for (v, g) in self.values[o..o + self.channels].iter_mut().zip(grad) {
            *v += g;
        }
    }

    fn add_entry(&mut self, node: usize, channel: usize, g: f64) {
        self.mark(node);
        self.values[node * self.channels + channel] += g;
    }

    /// Nodes with a (possibly zero) accumulated gradient, in first-touch order.
    pub fn touched_nodes(&self) -> &[usize] {
        &self.touched_nodes
    }

    pub fn clear(&mut self) {
        for &n in &self.touched_nodes {
            self.touched[n] = false;
            let o = n * self.channels;
            self.values[o..o + self.channels].iter_mut().for_each(|v| *v = 0.0);
        }
        self.touched_nodes.clear();
    }
}

/// Gradient accumulator shaped like a [`HexPlaneCodebook`].
#[derive(Debug, Clone)]
pub struct CodebookGradient {
    pub planes: Vec<PlaneGradient>,
}

impl CodebookGradient {
    pub fn new(codebook: &HexPlaneCodebook) -> Self {
        Self { planes: codebook.scales.iter().flat_map(|s| s.planes.iter().map(PlaneGradient::new)).collect() }
    }

    pub fn plane_mut(&mut self, scale: usize, plane: usize) -> &mut PlaneGradient {
        &mut self.planes[scale * 6 + plane]
    }

    pub fn plane(&self, scale: usize, plane: usize) -> &PlaneGradient {
        &self.planes[scale * 6 + plane]
    }

    /// Accumulates the encoder reverse pass for one query.
    pub fn accumulate(&mut self, codebook: &HexPlaneCodebook, x: &Vector3<f64>, t: f64, upstream: &[f64]) -> Result<(Vector3<f64>, f64)> {
        codebook.backward_with(x, t, upstream, |s, p, node, g| self.planes[s * 6 + p].add_node(node, g))
    }

    pub fn clear(&mut self) {
        self.planes.iter_mut().for_each(PlaneGradient::clear);
    }

    pub fn squared_norm(&self) -> f64 {
        self.planes
            .iter()
            .map(|p| p.touched_nodes.iter().map(|&n| p.values[n * p.channels..(n + 1) * p.channels].iter().map(|v| v * v).sum::<f64>()).sum::<f64>())
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_box() -> Aabb {
        Aabb::new(Vector3::zeros(), Vector3::repeat(1.0))
    }

    fn small_config() -> CodebookConfig {
        CodebookConfig { resolutions: vec![4, 7], time_resolution: 5, channels: 3, init_spread: 0.5 }
    }

    #[test]
    fn ones_give_ones() {
        let cfg = CodebookConfig { resolutions: vec![32, 64, 128, 256], ..Default::default() };
        let cb = HexPlaneCodebook::filled(&cfg, unit_box(), TimeRange::new(0.0, 19.0), 1.0).unwrap();
        let f = cb.encode(&Vector3::new(0.3, 0.9, 0.1), 0.77).unwrap();
        assert_eq!(f.len(), 128);
        assert!(f.values.iter().all(|&v| (v - 1.0).abs() < 1e-12));
        let s = cb.encode_smoothed(&Vector3::new(0.3, 0.9, 0.1), 0.1, 0.6).unwrap();
        assert!(s.values.iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn default_shapes() {
        let cb = HexPlaneCodebook::filled(&CodebookConfig::default(), unit_box(), TimeRange::new(0.0, 1.0), 1.0).unwrap();
        assert_eq!(cb.scales.len(), 3);
        for (level, res) in cb.scales.iter().zip([64, 128, 256]) {
            for plane in &level.planes {
                assert_eq!(plane.width, res);
                assert_eq!(plane.height, if plane.axis_pair.is_temporal() { 50 } else { res });
                assert_eq!(plane.data.len(), plane.width * plane.height * plane.channels);
            }
        }
    }

    #[test]
    fn out_of_box_clamps_and_nan_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cb = HexPlaneCodebook::random(&small_config(), unit_box(), TimeRange::new(0.0, 1.0), &mut rng).unwrap();
        let inside = cb.encode(&Vector3::new(1.0, 0.0, 0.5), 1.0).unwrap();
        let outside = cb.encode(&Vector3::new(1.5, -0.2, 0.5), 3.0).unwrap();
        assert_eq!(inside, outside);
        assert!(matches!(cb.encode(&Vector3::new(f64::NAN, 0.0, 0.0), 0.0), Err(Error::Domain(_))));
        assert!(matches!(cb.encode(&Vector3::zeros(), f64::INFINITY), Err(Error::Domain(_))));
    }

    #[test]
    fn smoothed_with_equal_times_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cb = HexPlaneCodebook::random(&small_config(), unit_box(), TimeRange::new(0.0, 1.0), &mut rng).unwrap();
        let x = Vector3::new(0.21, 0.64, 0.5);
        assert_eq!(cb.encode_smoothed(&x, 0.37, 0.37).unwrap(), cb.encode(&x, 0.37).unwrap());
    }

    #[test]
    fn unit_planes_gradient_is_bilinear_weight() {
        let cfg = CodebookConfig { resolutions: vec![5], time_resolution: 4, channels: 1, init_spread: 0.0 };
        let cb = HexPlaneCodebook::filled(&cfg, unit_box(), TimeRange::new(0.0, 1.0), 1.0).unwrap();
        let x = Vector3::new(0.3, 0.55, 0.9);
        let g = cb.encode_gradient(&x, 0.2, &[1.0]).unwrap();
        let xy: Vec<_> = g.nodes.iter().filter(|n| n.plane == AxisPair::Xy).collect();
        assert_eq!(xy.len(), 4);
        // x -> 1.2 cells, y -> 2.2 cells
        let expect = |r: usize, c: usize| {
            let wa = if c == 1 { 0.8 } else { 0.2 };
            let wb = if r == 2 { 0.8 } else { 0.2 };
            wa * wb
        };
        for n in xy {
            assert!((n.values[0] - expect(n.row, n.col)).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_upstream_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cb = HexPlaneCodebook::random(&small_config(), unit_box(), TimeRange::new(0.0, 1.0), &mut rng).unwrap();
        let g = cb.encode_gradient(&Vector3::new(0.4, 0.2, 0.7), 0.3, &vec![0.0; cb.feature_dim()]).unwrap();
        assert!(g.nodes.iter().all(|n| n.values.iter().all(|&v| v == 0.0)));
        assert_eq!(g.position, Vector3::zeros());
        assert_eq!(g.time, 0.0);
    }

    #[test]
    fn temporal_smoothness_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cb = HexPlaneCodebook::random(&small_config(), unit_box(), TimeRange::new(0.0, 1.0), &mut rng).unwrap();
        let mut grad = CodebookGradient::new(&cb);
        cb.temporal_smoothness(0.7, Some(&mut grad));
        let h = 1e-6;
        for (s, p, idx) in [(0, 3, 5), (1, 4, 17), (1, 5, 40), (0, 0, 2)] {
            let mut a = cb.clone();
            a.scales[s].planes[p].data[idx] += h;
            let mut b = cb.clone();
            b.scales[s].planes[p].data[idx] -= h;
            let fd = (a.temporal_smoothness(0.7, None) - b.temporal_smoothness(0.7, None)) / (2.0 * h);
            assert!((fd - grad.plane(s, p).values[idx]).abs() < 1e-7);
        }
    }

    #[test]
    fn gradient_clear_resets_touched() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cb = HexPlaneCodebook::random(&small_config(), unit_box(), TimeRange::new(0.0, 1.0), &mut rng).unwrap();
        let mut grad = CodebookGradient::new(&cb);
        grad.accumulate(&cb, &Vector3::new(0.5, 0.5, 0.5), 0.5, &vec![1.0; cb.feature_dim()]).unwrap();
        assert!(grad.squared_norm() > 0.0);
        grad.clear();
        assert_eq!(grad.squared_norm(), 0.0);
        assert!(grad.planes.iter().all(|p| p.values.iter().all(|&v| v == 0.0) && p.touched_nodes().is_empty()));
    }
}
