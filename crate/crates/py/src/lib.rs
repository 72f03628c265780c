//! Python bindings. Images cross the boundary as flat row-major RGB lists
//! together with `(height, width, 3)` shapes; configurations as JSON text.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use chronosplat::archive;
use chronosplat::avatar::CanonicalAvatar;
use chronosplat::dataset::{parse_pose_track, pose_track_csv};
use chronosplat::hexplane::{CodebookConfig, HexPlaneCodebook};
use chronosplat::math::{Aabb, TimeRange};
use chronosplat::rasterizer::{psnr as core_psnr, Camera as CoreCamera, RenderSettings};
use chronosplat::retrieval::{self, RetrievalParams};
use chronosplat::skinning::PoseTrack as CorePoseTrack;
use chronosplat::synth::{self, SynthSceneSpec};
use chronosplat::trainer::{self, TrainingConfig};
use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn err(e: chronosplat::Error) -> PyErr {
    if e.exit_code() == 3 {
        PyRuntimeError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[pyclass(module = "chronosplat", frozen)]
struct Camera {
    inner: CoreCamera,
}

#[pymethods]
impl Camera {
    #[staticmethod]
    #[pyo3(signature = (eye, target, focal, width, height, up = (0.0, 1.0, 0.0)))]
    fn look_at(eye: (f64, f64, f64), target: (f64, f64, f64), focal: f64, width: usize, height: usize, up: (f64, f64, f64)) -> PyResult<Self> {
        let v = |t: (f64, f64, f64)| Vector3::new(t.0, t.1, t.2);
        let inner = CoreCamera::look_at(v(eye), v(target), v(up), focal, width, height);
        inner.validate().map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner: CoreCamera = serde_json::from_str(text).map_err(json_err)?;
        inner.validate().map_err(err)?;
        Ok(Self { inner })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(json_err)
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        (self.inner.height, self.inner.width, 3)
    }
}

#[pyclass(module = "chronosplat", frozen)]
struct PoseTrack {
    inner: CorePoseTrack,
}

#[pymethods]
impl PoseTrack {
    #[staticmethod]
    fn from_csv(text: &str) -> PyResult<Self> {
        Ok(Self { inner: parse_pose_track(text).map_err(err)? })
    }

    fn to_csv(&self) -> String {
        pose_track_csv(&self.inner)
    }

    fn frames(&self) -> Vec<usize> {
        self.inner.records.iter().map(|r| r.frame_index).collect()
    }

    /// Joint axis-angle vectors of one frame.
    fn thetas(&self, frame: usize) -> PyResult<Vec<(f64, f64, f64)>> {
        let r = self.inner.records.iter().find(|r| r.frame_index == frame).ok_or_else(|| PyValueError::new_err(format!("no frame {frame}")))?;
        Ok(r.pose.thetas.iter().map(|t| (t.x, t.y, t.z)).collect())
    }

    /// Records whose frame index lies in `[start, end)`.
    fn window(&self, start: usize, end: usize) -> Self {
        Self { inner: CorePoseTrack { records: self.inner.records.iter().filter(|r| (start..end).contains(&r.frame_index)).cloned().collect() } }
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

#[pyclass(module = "chronosplat", frozen)]
struct Dataset {
    inner: chronosplat::dataset::Dataset,
}

#[pymethods]
impl Dataset {
    /// Synthetic scene from a JSON spec; `None` uses the default scene.
    #[staticmethod]
    #[pyo3(signature = (spec_json = None))]
    fn synthesize(py: Python<'_>, spec_json: Option<&str>) -> PyResult<Self> {
        let spec: SynthSceneSpec = match spec_json {
            Some(text) => serde_json::from_str(text).map_err(json_err)?,
            None => SynthSceneSpec::default(),
        };
        let inner = py.detach(|| synth::generate(&spec)).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: chronosplat::dataset::Dataset::load(path.as_ref()).map_err(err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path.as_ref()).map_err(err)
    }

    #[getter]
    fn view_count(&self) -> usize {
        self.inner.cameras.len()
    }

    #[getter]
    fn poses(&self) -> PoseTrack {
        PoseTrack { inner: self.inner.poses.clone() }
    }

    fn camera(&self, view: usize) -> PyResult<Camera> {
        self.inner.cameras.get(view).map(|c| Camera { inner: c.clone() }).ok_or_else(|| PyValueError::new_err(format!("no view {view}")))
    }

    /// Flat RGB image of one (view, frame) pair.
    fn image(&self, view: usize, frame: usize) -> PyResult<Vec<f64>> {
        self.inner.image(view, frame).map(<[f64]>::to_vec).ok_or_else(|| PyValueError::new_err(format!("no image for view {view} frame {frame}")))
    }

    /// `(train_frames, novel_frames, train_views, test_views)` with frame ranges as `(start, end)`.
    fn split(&self) -> ((usize, usize), (usize, usize), Vec<usize>, Vec<usize>) {
        let s = &self.inner.split;
        ((s.train_frames.start, s.train_frames.end), (s.novel_frames.start, s.novel_frames.end), s.train_views.clone(), s.test_views.clone())
    }
}

#[pyclass(module = "chronosplat", frozen)]
struct Codebook {
    inner: HexPlaneCodebook,
}

#[pymethods]
impl Codebook {
    /// Random codebook over the box `[lo, hi]^3` and frames `[first, last]`.
    #[staticmethod]
    #[pyo3(signature = (config_json, lo, hi, first_frame, last_frame, seed = 0))]
    fn random(config_json: &str, lo: (f64, f64, f64), hi: (f64, f64, f64), first_frame: f64, last_frame: f64, seed: u64) -> PyResult<Self> {
        let cfg: CodebookConfig = serde_json::from_str(config_json).map_err(json_err)?;
        let bbox = Aabb::new(Vector3::new(lo.0, lo.1, lo.2), Vector3::new(hi.0, hi.1, hi.2));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inner = HexPlaneCodebook::random(&cfg, bbox, TimeRange::new(first_frame, last_frame), &mut rng).map_err(err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn feature_dim(&self) -> usize {
        self.inner.feature_dim()
    }

    /// Feature at world position `x` and normalized time `t`.
    fn encode(&self, x: (f64, f64, f64), t: f64) -> PyResult<Vec<f64>> {
        Ok(self.inner.encode(&Vector3::new(x.0, x.1, x.2), t).map_err(err)?.values)
    }
}

#[pyclass(module = "chronosplat", frozen)]
struct Avatar {
    inner: CanonicalAvatar,
}

fn config_from(json: Option<&str>) -> PyResult<TrainingConfig> {
    let cfg: TrainingConfig = match json {
        Some(text) => serde_json::from_str(text).map_err(json_err)?,
        None => TrainingConfig::default(),
    };
    cfg.validate().map_err(err)?;
    Ok(cfg)
}

fn retrieval_params(k: usize, window: f64, smoothing: bool) -> RetrievalParams {
    RetrievalParams { k, window, smoothing }
}

#[pymethods]
impl Avatar {
    /// Initial avatar for the training split of `dataset`.
    #[staticmethod]
    #[pyo3(signature = (dataset, config_json = None))]
    fn init(dataset: &Dataset, config_json: Option<&str>) -> PyResult<Self> {
        let cfg = config_from(config_json)?;
        let ds = &dataset.inner;
        let inner = CanonicalAvatar::init(ds.skeleton.clone(), ds.track_in(&ds.split.train_frames), &cfg.model, cfg.seed).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: archive::load(path.as_ref()).map_err(err)?.avatar })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        archive::save(path.as_ref(), &self.inner, None).map_err(err)
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        Ok(Self { inner: archive::from_bytes(data).map_err(err)?.avatar })
    }

    fn to_bytes(&self) -> PyResult<std::borrow::Cow<'static, [u8]>> {
        Ok(archive::to_bytes(&self.inner, None).map_err(err)?.into())
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }

    #[getter]
    fn time_range(&self) -> (f64, f64) {
        (self.inner.time_range.first_frame, self.inner.time_range.last_frame)
    }

    #[getter]
    fn training_track(&self) -> PoseTrack {
        PoseTrack { inner: self.inner.training_track.clone() }
    }

    /// Recorded appearance of training frame `frame` under its training pose.
    fn render_frame(&self, py: Python<'_>, frame: usize, camera: &Camera) -> PyResult<Vec<f64>> {
        let pose = self
            .inner
            .training_track
            .records
            .iter()
            .find(|r| r.frame_index == frame)
            .map(|r| r.pose.clone())
            .ok_or_else(|| PyValueError::new_err(format!("frame {frame} is not a training frame")))?;
        let img = py.detach(|| self.inner.render_frame(frame as f64, &pose, &camera.inner, &RenderSettings::default())).map_err(err)?;
        Ok(img.rgb)
    }

    /// Retrieval trace rows `(frame, part, timestamp, jitter)` for a novel track.
    #[pyo3(signature = (novel, k = 20, window = 3.0))]
    fn retrieve(&self, novel: &PoseTrack, k: usize, window: f64) -> PyResult<Vec<(usize, String, f64, bool)>> {
        let index = retrieval::build_index(&self.inner.training_track, &self.inner.skeleton).map_err(err)?;
        let trace = retrieval::retrieve_track(&index, &self.inner.skeleton, &novel.inner, retrieval_params(k, window, true)).map_err(err)?;
        Ok(trace.rows.into_iter().map(|r| (r.frame, r.part.as_str().to_string(), r.timestamp, r.jitter)).collect())
    }

    /// Rendered frames `(frame, rgb)` for a novel track.
    #[pyo3(signature = (novel, camera, k = 20, window = 3.0, smoothing = true))]
    fn animate(&self, py: Python<'_>, novel: &PoseTrack, camera: &Camera, k: usize, window: f64, smoothing: bool) -> PyResult<Vec<(usize, Vec<f64>)>> {
        let frames = py
            .detach(|| {
                let index = retrieval::build_index(&self.inner.training_track, &self.inner.skeleton)?;
                let trace = retrieval::retrieve_track(&index, &self.inner.skeleton, &novel.inner, retrieval_params(k, window, smoothing))?;
                retrieval::animate(&self.inner, &trace, &novel.inner, &camera.inner, &RenderSettings::default(), smoothing)
            })
            .map_err(err)?;
        Ok(frames.into_iter().map(|f| (f.frame, f.image.rgb)).collect())
    }
}

/// Trains `avatar` on the training split; returns the new avatar and the
/// loss log as `(iteration, loss, l1, ssim, gaussian_count)` rows.
#[pyfunction]
#[pyo3(signature = (avatar, dataset, config_json = None))]
fn train(py: Python<'_>, avatar: &Avatar, dataset: &Dataset, config_json: Option<&str>) -> PyResult<(Avatar, Vec<(usize, f64, f64, f64, usize)>)> {
    let cfg = config_from(config_json)?;
    let ds = &dataset.inner;
    let outcome = py
        .detach(|| {
            let samples = ds.samples(&ds.partition()?.train)?;
            trainer::train(avatar.inner.clone(), &samples, &cfg)
        })
        .map_err(err)?;
    let log = outcome.log.iter().map(|r| (r.iteration, r.loss, r.l1, r.ssim, r.gaussian_count)).collect();
    Ok((Avatar { inner: outcome.avatar }, log))
}

#[pyfunction]
fn psnr(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    if a.len() != b.len() {
        return Err(PyValueError::new_err("images differ in size"));
    }
    Ok(core_psnr(&a, &b))
}

#[pymodule]
#[pyo3(name = "chronosplat")]
fn py_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Camera>()?;
    m.add_class::<PoseTrack>()?;
    m.add_class::<Dataset>()?;
    m.add_class::<Codebook>()?;
    m.add_class::<Avatar>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    Ok(())
}
