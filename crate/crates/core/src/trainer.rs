//! Optimization of a [`CanonicalAvatar`] against multi-view images.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::avatar::{AvatarGradient, CanonicalAvatar, ModelConfig, TimeQuery};
use crate::hexplane::CodebookGradient;
use crate::loss::{photometric, PhotometricLoss};
use crate::math::logit;
use crate::rasterizer::{Camera, RenderSettings};
use crate::skinning::Pose;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningRates {
    pub planes: f64,
    pub decoder: f64,
    pub sh: f64,
    pub positions: f64,
    pub blend_logits: f64,
    pub blend_net: f64,
    pub opacity_bias: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self { planes: 1e-2, decoder: 1e-3, sh: 2.5e-3, positions: 1.6e-4, blend_logits: 1e-3, blend_net: 1e-3, opacity_bias: 1e-2 }
    }
}

impl LearningRates {
    fn all(&self) -> [(&'static str, f64); 7] {
        [
            ("planes", self.planes),
            ("decoder", self.decoder),
            ("sh", self.sh),
            ("positions", self.positions),
            ("blend_logits", self.blend_logits),
            ("blend_net", self.blend_net),
            ("opacity_bias", self.opacity_bias),
        ]
    }
}

/// What the codebook's time coordinate is driven by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Conditioning {
    /// The frame's own timestamp.
    #[default]
    Time,
    /// The timestamp of the first training frame with the same pose, so
    /// frames with repeated poses share one query.
    Pose,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub iterations: usize,
    pub learning_rates: LearningRates,
    pub lambda_ssim: f64,
    /// Weight of the second-difference penalty along time on the temporal planes.
    pub temporal_smoothness: f64,
    pub prune_interval: usize,
    pub opacity_threshold: f64,
    pub opacity_reset_interval: usize,
    /// No density control at or after this iteration.
    pub density_until: usize,
    pub seed: u64,
    pub conditioning: Conditioning,
    pub tile_size: usize,
    pub background: [f64; 3],
    pub model: ModelConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            iterations: 3000,
            learning_rates: LearningRates::default(),
            lambda_ssim: 0.2,
            temporal_smoothness: 0.0,
            prune_interval: 500,
            opacity_threshold: 0.005,
            opacity_reset_interval: 100_000,
            density_until: 2500,
            seed: 0,
            conditioning: Conditioning::Time,
            tile_size: 16,
            background: [0.0; 3],
            model: ModelConfig::default(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, lr) in self.learning_rates.all() {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("learning rate {name} must be positive")));
            }
        }
        if self.prune_interval == 0 || self.opacity_reset_interval == 0 {
            return Err(Error::Config("density control intervals must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda_ssim) {
            return Err(Error::Config("lambda_ssim must be in [0,1]".into()));
        }
        if self.temporal_smoothness < 0.0 || self.opacity_threshold < 0.0 {
            return Err(Error::Config("weights and thresholds must be non-negative".into()));
        }
        if self.tile_size == 0 {
            return Err(Error::Config("tile size must be positive".into()));
        }
        Ok(())
    }

    pub fn render_settings(&self) -> RenderSettings {
        RenderSettings { background: self.background, tile_size: self.tile_size }
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-15;

/// First and second moments for one flat parameter group.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n] }
    }

    fn update(&mut self, i: usize, param: &mut f64, g: f64, lr: f64, bc1: f64, bc2: f64) {
        let m = BETA1 * self.m[i] + (1.0 - BETA1) * g;
        let v = BETA2 * self.v[i] + (1.0 - BETA2) * g * g;
        self.m[i] = m;
        self.v[i] = v;
        *param -= lr * (m / bc1) / ((v / bc2).sqrt() + EPS);
    }

    fn retain_blocks(&mut self, keep: &[bool], block: usize) {
        let pick = |src: &[f64]| -> Vec<f64> {
            keep.iter().enumerate().filter(|(_, k)| **k).flat_map(|(i, _)| src[i * block..(i + 1) * block].iter().copied()).collect()
        };
        self.m = pick(&self.m);
        self.v = pick(&self.v);
    }
}

/// Adaptive-moment optimizer state for every parameter group of an avatar.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub step: u64,
    pub planes: Moments,
    pub decoder: Moments,
    pub sh: Moments,
    pub positions: Moments,
    pub blend_logits: Moments,
    pub blend_net: Moments,
    pub opacity_bias: Moments,
}

impl Optimizer {
    pub fn new(avatar: &CanonicalAvatar) -> Self {
        let n = avatar.len();
        Self {
            step: 0,
            planes: Moments::zeros(avatar.codebook.entry_count()),
            decoder: Moments::zeros(avatar.decoder.mlp.parameter_count()),
            sh: Moments::zeros(avatar.colors.coeffs.len()),
            positions: Moments::zeros(n * 3),
            blend_logits: Moments::zeros(avatar.blend.base_logits.len()),
            blend_net: Moments::zeros(avatar.blend.net.parameter_count()),
            opacity_bias: Moments::zeros(n),
        }
    }

    pub fn groups(&self) -> [(&'static str, &Moments); 7] {
        [
            ("planes", &self.planes),
            ("decoder", &self.decoder),
            ("sh", &self.sh),
            ("positions", &self.positions),
            ("blend_logits", &self.blend_logits),
            ("blend_net", &self.blend_net),
            ("opacity_bias", &self.opacity_bias),
        ]
    }

    pub fn groups_mut(&mut self) -> [&mut Moments; 7] {
        [&mut self.planes, &mut self.decoder, &mut self.sh, &mut self.positions, &mut self.blend_logits, &mut self.blend_net, &mut self.opacity_bias]
    }

    fn retain(&mut self, keep: &[bool], sh_block: usize, joints: usize) {
        self.sh.retain_blocks(keep, sh_block);
        self.positions.retain_blocks(keep, 3);
        self.blend_logits.retain_blocks(keep, joints);
        self.opacity_bias.retain_blocks(keep, 1);
    }

    /// One update of every group. Codebook entries are updated only at
    /// nodes that received gradient.
    pub fn apply(&mut self, avatar: &mut CanonicalAvatar, grad: &AvatarGradient, cb: &CodebookGradient, lr: &LearningRates) {
        self.step += 1;
        let bc1 = 1.0 - BETA1.powi(self.step as i32);
        let bc2 = 1.0 - BETA2.powi(self.step as i32);

        let mut offset = 0;
        let mut plane_index = 0;
        for level in avatar.codebook.scales.iter_mut() {
            for plane in level.planes.iter_mut() {
                let pg = &cb.planes[plane_index];
                let ch = plane.channels;
                for &node in pg.touched_nodes() {
                    for c in 0..ch {
                        let e = node * ch + c;
                        self.planes.update(offset + e, &mut plane.data[e], pg.values[e], lr.planes, bc1, bc2);
                    }
                }
                offset += plane.data.len();
                plane_index += 1;
            }
        }
        for (i, (p, g)) in avatar.decoder.mlp.parameters_mut().zip(grad.decoder.values()).enumerate() {
            self.decoder.update(i, p, *g, lr.decoder, bc1, bc2);
        }
        for (i, (p, g)) in avatar.colors.coeffs.iter_mut().zip(&grad.sh).enumerate() {
            self.sh.update(i, p, *g, lr.sh, bc1, bc2);
        }
        for (i, (p, g)) in avatar.positions.iter_mut().zip(&grad.positions).enumerate() {
            for k in 0..3 {
                self.positions.update(i * 3 + k, &mut p[k], g[k], lr.positions, bc1, bc2);
            }
        }
        let (lo, hi) = (avatar.bbox.min_v(), avatar.bbox.max_v());
        for p in avatar.positions.iter_mut() {
            *p = p.zip_zip_map(&lo, &hi, |v, a, b| v.clamp(a, b));
        }
        for (i, (p, g)) in avatar.blend.base_logits.iter_mut().zip(grad.blend_logits.iter()).enumerate() {
            self.blend_logits.update(i, p, *g, lr.blend_logits, bc1, bc2);
        }
        for (i, (p, g)) in avatar.blend.net.parameters_mut().zip(grad.blend_net.values()).enumerate() {
            self.blend_net.update(i, p, *g, lr.blend_net, bc1, bc2);
        }
        for (i, (p, g)) in avatar.opacity_bias.iter_mut().zip(&grad.opacity_bias).enumerate() {
            self.opacity_bias.update(i, p, *g, lr.opacity_bias, bc1, bc2);
        }
    }
}

/// One supervised observation.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub frame: usize,
    pub view: usize,
    pub pose: Pose,
    pub camera: Camera,
    /// Interleaved RGB in `[0,1]`.
    pub image: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    pub loss: f64,
    pub l1: f64,
    pub ssim: f64,
    pub gaussian_count: usize,
}

pub fn loss_log_csv(log: &[LossRecord]) -> String {
    let mut s = String::from("iteration,loss,l1,ssim,gaussian_count\n");
    for r in log {
        let _ = writeln!(s, "{},{},{},{},{}", r.iteration, r.loss, r.l1, r.ssim, r.gaussian_count);
    }
    s
}

pub fn write_loss_log(path: &Path, log: &[LossRecord]) -> Result<()> {
    std::fs::write(path, loss_log_csv(log))?;
    Ok(())
}

/// Normalized codebook time used for training frame `frame`.
pub fn conditioning_time(avatar: &CanonicalAvatar, frame: usize, mode: Conditioning) -> f64 {
    let source = match mode {
        Conditioning::Time => frame,
        Conditioning::Pose => {
            let records = &avatar.training_track.records;
            match records.iter().find(|r| r.frame_index == frame) {
                Some(cur) => records.iter().find(|r| r.pose == cur.pose).map_or(frame, |r| r.frame_index),
                None => frame,
            }
        }
    };
    avatar.normalized_time(source as f64)
}

/// Loss of one sample with gradients of every parameter group. The codebook
/// gradient (including the temporal smoothness term) goes into `cb`.
pub fn loss_and_gradient(
    avatar: &CanonicalAvatar,
    sample: &TrainingSample,
    cfg: &TrainingConfig,
    cb: &mut CodebookGradient,
) -> Result<(PhotometricLoss, AvatarGradient)> {
    let cam = &sample.camera;
    if sample.image.len() != cam.pixel_count() * 3 {
        return Err(Error::Config(format!("target has {} values, camera expects {}", sample.image.len(), cam.pixel_count() * 3)));
    }
    let settings = cfg.render_settings();
    let t = conditioning_time(avatar, sample.frame, cfg.conditioning);
    let fwd = avatar.forward(&vec![TimeQuery::At(t); avatar.len()], &sample.pose)?;
    let (image, state) = avatar.render_with_state(&fwd, cam, &settings)?;
    let (mut loss, upstream) = photometric(&image.rgb, &sample.image, cam.width, cam.height, cfg.lambda_ssim)?;
    let grad = avatar.backward(&fwd, cam, &settings, &state, &upstream, cb)?;
    loss.total += avatar.codebook.temporal_smoothness(cfg.temporal_smoothness, Some(cb));
    Ok((loss, grad))
}

fn first_non_finite(grad: &AvatarGradient, cb: &CodebookGradient) -> Option<&'static str> {
    let finite = |mut it: Box<dyn Iterator<Item = &f64> + '_>| it.all(|v| v.is_finite());
    if !cb.planes.iter().all(|p| p.values.iter().all(|v| v.is_finite())) {
        return Some("planes");
    }
    if !finite(Box::new(grad.decoder.values())) {
        return Some("decoder");
    }
    if !finite(Box::new(grad.sh.iter())) {
        return Some("sh");
    }
    if !grad.positions.iter().all(|p| p.iter().all(|v| v.is_finite())) {
        return Some("positions");
    }
    if !finite(Box::new(grad.blend_logits.iter())) {
        return Some("blend_logits");
    }
    if !finite(Box::new(grad.blend_net.values())) {
        return Some("blend_net");
    }
    if !finite(Box::new(grad.opacity_bias.iter())) {
        return Some("opacity_bias");
    }
    None
}

/// Forward, backward and one optimizer update. A non-finite loss or
/// gradient aborts before any parameter changes.
pub fn training_step(
    avatar: &mut CanonicalAvatar,
    opt: &mut Optimizer,
    sample: &TrainingSample,
    cfg: &TrainingConfig,
    cb: &mut CodebookGradient,
) -> Result<PhotometricLoss> {
    cb.clear();
    let (loss, grad) = loss_and_gradient(avatar, sample, cfg, cb)?;
    if let Some(group) = first_non_finite(&grad, cb) {
        return Err(Error::NonFinite { group: group.into() });
    }
    if !loss.total.is_finite() {
        return Err(Error::NonFinite { group: "loss".into() });
    }
    opt.apply(avatar, &grad, cb, &cfg.learning_rates);
    Ok(loss)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DensityReport {
    pub pruned: Vec<usize>,
    pub reset: bool,
}

const DENSITY_SAMPLES: usize = 8;
const RESET_OPACITY: f64 = 0.01;

/// Prunes faint or oversized gaussians and, on reset iterations, lowers each
/// per-gaussian opacity bias so the decoded opacity is at most 0.01.
pub fn density_control(avatar: &mut CanonicalAvatar, opt: Option<&mut Optimizer>, cfg: &TrainingConfig, iteration: usize) -> Result<DensityReport> {
    let mut report = DensityReport::default();
    let prune = iteration.is_multiple_of(cfg.prune_interval);
    let reset = iteration.is_multiple_of(cfg.opacity_reset_interval);
    if !prune && !reset {
        return Ok(report);
    }
    let n = avatar.len();
    let times: Vec<f64> = (0..DENSITY_SAMPLES).map(|k| k as f64 / (DENSITY_SAMPLES - 1) as f64).collect();
    let mut mean_opacity = vec![0.0; n];
    let mut max_scale = vec![0.0f64; n];
    let mut max_logit = vec![f64::NEG_INFINITY; n];
    for &t in &times {
        for (i, d) in avatar.decode_at(t)?.iter().enumerate() {
            mean_opacity[i] += d.opacity / DENSITY_SAMPLES as f64;
            max_scale[i] = max_scale[i].max(d.scale.max());
            max_logit[i] = max_logit[i].max(logit(d.opacity));
        }
    }
    let mut opt = opt;
    if prune {
        let limit = 0.5 * avatar.bbox.diagonal();
        let keep: Vec<bool> = (0..n).map(|i| mean_opacity[i] >= cfg.opacity_threshold && max_scale[i] <= limit).collect();
        report.pruned = (0..n).filter(|&i| !keep[i]).collect();
        if report.pruned.len() == n {
            return Err(Error::Training("density control pruned every gaussian".into()));
        }
        if !report.pruned.is_empty() {
            let sh_block = avatar.colors.per_gaussian();
            avatar.retain(&keep);
            if let Some(o) = opt.as_deref_mut() {
                o.retain(&keep, sh_block, avatar.skeleton.joint_count());
            }
            let mut it = keep.iter();
            max_logit.retain(|_| *it.next().expect("mask length"));
        }
    }
    if reset {
        let target = logit(RESET_OPACITY);
        for (b, &z) in avatar.opacity_bias.iter_mut().zip(&max_logit) {
            if z > target {
                *b -= z - target;
            }
        }
        if let Some(o) = opt {
            o.opacity_bias = Moments::zeros(avatar.len());
        }
        report.reset = true;
    }
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub avatar: CanonicalAvatar,
    pub optimizer: Optimizer,
    pub log: Vec<LossRecord>,
}

/// Runs `cfg.iterations` steps over shuffled samples, with density control
/// on schedule. The result is rounded to archive precision.
pub fn train(avatar: CanonicalAvatar, samples: &[TrainingSample], cfg: &TrainingConfig) -> Result<TrainingOutcome> {
    train_with_progress(avatar, samples, cfg, |_| {})
}

pub fn train_with_progress(
    mut avatar: CanonicalAvatar,
    samples: &[TrainingSample],
    cfg: &TrainingConfig,
    mut progress: impl FnMut(&LossRecord),
) -> Result<TrainingOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut opt = Optimizer::new(&avatar);
    let mut log = Vec::with_capacity(cfg.iterations);
    if cfg.iterations == 0 {
        return Ok(TrainingOutcome { avatar, optimizer: opt, log });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut cb = CodebookGradient::new(&avatar.codebook);
    for it in 1..=cfg.iterations {
        if order.is_empty() {
            order = (0..samples.len()).collect();
            order.shuffle(&mut rng);
            order.reverse();
        }
        let sample = &samples[order.pop().expect("refilled")];
        let loss = training_step(&mut avatar, &mut opt, sample, cfg, &mut cb)?;
        let record = LossRecord { iteration: it, loss: loss.total, l1: loss.l1, ssim: loss.ssim, gaussian_count: avatar.len() };
        progress(&record);
        log.push(record);
        if it < cfg.density_until && it < cfg.iterations {
            density_control(&mut avatar, Some(&mut opt), cfg, it)?;
        }
    }
    avatar.quantize();
    Ok(TrainingOutcome { avatar, optimizer: opt, log })
}
