use std::time::Instant;

use chronosplat::avatar::CanonicalAvatar;
use chronosplat::rasterizer::psnr;
use chronosplat::retrieval::{animate, build_index, retrieve_track, RetrievalParams};
use chronosplat::synth::{generate, SynthSceneSpec};
use chronosplat::trainer::{train_with_progress, TrainingConfig};

fn arg<T: std::str::FromStr>(i: usize, d: T) -> T {
    std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(d)
}

fn main() -> chronosplat::Result<()> {
    let spec = SynthSceneSpec::default();
    let ds = generate(&spec)?;
    let part = ds.partition()?;
    let samples = ds.samples(&part.train)?;
    let mut cfg = TrainingConfig { iterations: arg(1, 1500), ..Default::default() };
    cfg.temporal_smoothness = arg(2, 0.0);
    cfg.model.codebook.time_resolution = arg(3, 20);
    let track = ds.track_in(&ds.split.train_frames);
    let avatar = CanonicalAvatar::init(ds.skeleton.clone(), track.clone(), &cfg.model, cfg.seed)?;
    let t0 = Instant::now();
    let out = train_with_progress(avatar, &samples, &cfg, |r| {
        if r.iteration % 250 == 0 {
            println!("{} loss {:.5} l1 {:.5} n {} {:?}", r.iteration, r.loss, r.l1, r.gaussian_count, t0.elapsed());
        }
    })?;
    let settings = cfg.render_settings();
    let mut acc = 0.0;
    for s in &part.heldout {
        let img = out.avatar.render_frame(s.frame as f64, ds.pose(s.frame).unwrap(), &ds.cameras[s.view], &settings)?;
        acc += psnr(&img.rgb, ds.image(s.view, s.frame).unwrap());
    }
    println!("heldout psnr {:.2}", acc / part.heldout.len() as f64);
    let index = build_index(&out.avatar.training_track, &out.avatar.skeleton)?;
    let novel = ds.track_in(&(20..30));
    let trace = retrieve_track(&index, &ds.skeleton, &novel, RetrievalParams::default())?;
    print!("{}", trace.to_csv());
    for &v in &ds.split.test_views {
        let frames = animate(&out.avatar, &trace, &novel, &ds.cameras[v], &settings, true)?;
        for f in frames {
            println!("view {v} frame {} psnr {:.2}", f.frame, psnr(&f.image.rgb, ds.image(v, f.frame).unwrap()));
        }
    }
    Ok(())
}
