//! Small scenes for the trainer and archive tests.

#![allow(dead_code)]

use chronosplat::avatar::{CanonicalAvatar, ModelConfig};
use chronosplat::dataset::{Dataset, SplitManifest};
use chronosplat::decoder::DecoderConfig;
use chronosplat::hexplane::CodebookConfig;
use chronosplat::skinning::BlendFieldConfig;
use chronosplat::synth::{generate, SynthSceneSpec};
use chronosplat::trainer::{TrainingConfig, TrainingSample};

pub fn tiny_spec(size: usize) -> SynthSceneSpec {
    let mut spec = SynthSceneSpec::default();
    spec.frame_count = 10;
    spec.cameras.width = size;
    spec.cameras.height = size;
    spec.cameras.focal = 1.4 * size as f64;
    spec.split = SplitManifest { train_frames: 0..8, novel_frames: 8..10, train_views: vec![0, 2, 4, 6], test_views: vec![1, 5] };
    spec
}

pub fn tiny_model(gaussians: usize) -> ModelConfig {
    ModelConfig {
        gaussian_count: gaussians,
        init_scale: 0.15,
        sh_degree: 1,
        codebook: CodebookConfig { resolutions: vec![4, 8], time_resolution: 5, channels: 4, init_spread: 0.2 },
        decoder: DecoderConfig { depth: 1, width: 16, max_offset: 0.1 },
        blend: BlendFieldConfig { depth: 1, width: 8, idw_power: 2.0 },
        ..ModelConfig::default()
    }
}

pub struct Scene {
    pub dataset: Dataset,
    pub avatar: CanonicalAvatar,
    pub samples: Vec<TrainingSample>,
    pub config: TrainingConfig,
}

pub fn scene(size: usize, gaussians: usize, seed: u64) -> Scene {
    let dataset = generate(&tiny_spec(size)).expect("valid spec");
    let config = TrainingConfig { model: tiny_model(gaussians), seed, ..TrainingConfig::default() };
    let track = dataset.track_in(&dataset.split.train_frames);
    let avatar = CanonicalAvatar::init(dataset.skeleton.clone(), track, &config.model, seed).expect("init");
    let samples = dataset.samples(&dataset.partition().expect("partition").train).expect("samples");
    Scene { dataset, avatar, samples, config }
}
