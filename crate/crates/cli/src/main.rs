use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chronosplat::archive;
use chronosplat::avatar::CanonicalAvatar;
use chronosplat::dataset::{load_camera, load_pose_track, save_camera, save_pose_track, Dataset};
use chronosplat::rasterizer::image_io::{save_png, save_raw};
use chronosplat::rasterizer::RenderSettings;
use chronosplat::retrieval::{animate, build_index, retrieve_track, RetrievalParams, RetrievalTrace};
use chronosplat::skinning::PoseTrack;
use chronosplat::synth::{generate, SynthSceneSpec};
use chronosplat::trainer::{train_with_progress, write_loss_log, TrainingConfig};
use chronosplat::{Error, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "chronosplat", version, about = "Train, render and animate time-indexed gaussian avatars")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit an avatar to a dataset directory.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        /// JSON training configuration; omitted fields take their defaults.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Loss log path (default: the archive path with `.loss.csv` appended).
        #[arg(long)]
        loss_log: Option<PathBuf>,
        /// Also store optimizer moments in the archive.
        #[arg(long)]
        checkpoint: bool,
    },
    /// Render the recorded appearance of one training frame.
    Render {
        #[arg(long)]
        avatar: PathBuf,
        #[arg(long)]
        frame: usize,
        #[arg(long)]
        pose_track: PathBuf,
        #[arg(long)]
        camera: PathBuf,
        /// `.png` writes an 8-bit image; anything else a raw float dump.
        #[arg(long)]
        out: PathBuf,
    },
    /// Drive the avatar with a novel pose track.
    Animate {
        #[arg(long)]
        avatar: PathBuf,
        #[arg(long)]
        novel_poses: PathBuf,
        #[arg(long)]
        camera: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        retrieval: RetrievalArgs,
        #[arg(long)]
        no_smoothing: bool,
        /// Also write raw float dumps next to the PNG frames.
        #[arg(long)]
        raw: bool,
    },
    /// Write the retrieved timestamp curve without rendering.
    Retrieve {
        #[arg(long)]
        avatar: PathBuf,
        #[arg(long)]
        novel_poses: PathBuf,
        #[arg(long)]
        emit_curve: PathBuf,
        #[command(flatten)]
        retrieval: RetrievalArgs,
    },
    /// Generate a synthetic dataset directory.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RetrievalArgs {
    #[arg(long, default_value_t = 20)]
    k: usize,
    #[arg(long, default_value_t = 3.0)]
    window: f64,
}

impl RetrievalArgs {
    fn params(&self, smoothing: bool) -> RetrievalParams {
        RetrievalParams { k: self.k, window: self.window, smoothing }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Validation(format!("cannot read {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

fn read_track(path: &Path) -> Result<PoseTrack> {
    load_pose_track(path).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
}

fn load_avatar(path: &Path) -> Result<CanonicalAvatar> {
    Ok(archive::load(path)?.avatar)
}

fn cmd_train(dataset: &Path, config: &Path, out: &Path, seed: Option<u64>, loss_log: Option<PathBuf>, checkpoint: bool) -> Result<()> {
    let ds = Dataset::load(dataset)?;
    let mut cfg: TrainingConfig = read_json(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let part = ds.partition()?;
    let samples = ds.samples(&part.train)?;
    let track = ds.track_in(&ds.split.train_frames);
    let avatar = CanonicalAvatar::init(ds.skeleton.clone(), track, &cfg.model, cfg.seed)?;
    let every = (cfg.iterations / 20).max(1);
    let outcome = train_with_progress(avatar, &samples, &cfg, |r| {
        if r.iteration % every == 0 {
            eprintln!("iter {:>6}  loss {:.5}  l1 {:.5}  gaussians {}", r.iteration, r.loss, r.l1, r.gaussian_count);
        }
    })?;
    archive::save(out, &outcome.avatar, checkpoint.then_some(&outcome.optimizer))?;
    let log_path = loss_log.unwrap_or_else(|| {
        let mut p = out.as_os_str().to_owned();
        p.push(".loss.csv");
        PathBuf::from(p)
    });
    write_loss_log(&log_path, &outcome.log)?;
    Ok(())
}

fn cmd_render(avatar: &Path, frame: usize, pose_track: &Path, camera: &Path, out: &Path) -> Result<()> {
    let avatar = load_avatar(avatar)?;
    let track = read_track(pose_track)?;
    let cam = load_camera(camera)?;
    let pose = track
        .records
        .iter()
        .find(|r| r.frame_index == frame)
        .map(|r| &r.pose)
        .ok_or_else(|| Error::Usage(format!("frame {frame} is not in {}", pose_track.display())))?;
    let img = avatar.render_frame(frame as f64, pose, &cam, &RenderSettings::default())?;
    write_image(out, &img.rgb, img.width, img.height)
}

fn write_image(out: &Path, rgb: &[f64], width: usize, height: usize) -> Result<()> {
    if out.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
        save_png(out, width, height, rgb)
    } else {
        save_raw(out, width, height, rgb)
    }
}

fn retrieval_trace(avatar: &CanonicalAvatar, novel: &PoseTrack, params: RetrievalParams) -> Result<RetrievalTrace> {
    let index = build_index(&avatar.training_track, &avatar.skeleton)?;
    retrieve_track(&index, &avatar.skeleton, novel, params)
}

fn cmd_animate(avatar: &Path, novel: &Path, camera: &Path, out: &Path, params: RetrievalParams, raw: bool) -> Result<()> {
    let avatar = load_avatar(avatar)?;
    let novel = read_track(novel)?;
    let cam = load_camera(camera)?;
    let trace = retrieval_trace(&avatar, &novel, params)?;
    let frames = animate(&avatar, &trace, &novel, &cam, &RenderSettings::default(), params.smoothing)?;
    std::fs::create_dir_all(out)?;
    for f in &frames {
        let img = &f.image;
        save_png(&out.join(format!("frame{:04}.png", f.frame)), img.width, img.height, &img.rgb)?;
        if raw {
            save_raw(&out.join(format!("frame{:04}.raw", f.frame)), img.width, img.height, &img.rgb)?;
        }
    }
    trace.write_csv(&out.join("trace.csv"))?;
    eprintln!("{} frames, {} jitter rows", frames.len(), trace.jitter_count());
    Ok(())
}

fn cmd_retrieve(avatar: &Path, novel: &Path, curve: &Path, params: RetrievalParams) -> Result<()> {
    let avatar = load_avatar(avatar)?;
    let novel = read_track(novel)?;
    retrieval_trace(&avatar, &novel, params)?.write_csv(curve)
}

/// Writes the dataset plus per-view camera files and a novel pose track
/// that starts two frames early to cover the retrieval warm-up.
fn cmd_synth(spec: &Path, out: &Path) -> Result<()> {
    let spec: SynthSceneSpec = read_json(spec)?;
    let ds = generate(&spec)?;
    ds.save(out)?;
    for (v, cam) in ds.cameras.iter().enumerate() {
        save_camera(&out.join(format!("camera{v}.json")), cam)?;
    }
    let novel = &ds.split.novel_frames;
    let warm = novel.start.saturating_sub(2)..novel.end;
    save_pose_track(&out.join("novel_poses.csv"), &ds.track_in(&warm))?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { dataset, config, out, seed, loss_log, checkpoint } => cmd_train(&dataset, &config, &out, seed, loss_log, checkpoint),
        Command::Render { avatar, frame, pose_track, camera, out } => cmd_render(&avatar, frame, &pose_track, &camera, &out),
        Command::Animate { avatar, novel_poses, camera, out, retrieval, no_smoothing, raw } => {
            cmd_animate(&avatar, &novel_poses, &camera, &out, retrieval.params(!no_smoothing), raw)
        }
        Command::Retrieve { avatar, novel_poses, emit_curve, retrieval } => cmd_retrieve(&avatar, &novel_poses, &emit_curve, retrieval.params(true)),
        Command::Synth { spec, out } => cmd_synth(&spec, &out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
