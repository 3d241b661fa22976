//! Python bindings: configs, schedules, guidance, motion metrics, and the
//! dataset / training / inference entry points.

use std::path::PathBuf;

use avatar_diffusion::audio::window_stack as stack_windows;
use avatar_diffusion::checkpoint::Checkpoint;
use avatar_diffusion::data::{synth_dataset as synth, SynthDataset, SynthOptions};
use avatar_diffusion::diffusion::{add_noise as noise, cfg_combine as combine, predict_x0 as x0};
use avatar_diffusion::infer::{infer as run_infer, InferRequest};
use avatar_diffusion::motion::{self, KeypointIndexMap, KeypointSequence};
use avatar_diffusion::train::{
    checkpoint_with_step, extractor_for, train_stage1, train_stage2, TrainOptions, TrainingData,
};
use avatar_diffusion::tsm::schedule_for;
use avatar_diffusion::{DiffusionSchedule, Error, GuidanceScales, ModelConfig};
use candle_core::{Device, Tensor};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

create_exception!(
    avatar_diffusion_py,
    AvatarError,
    PyException,
    "Error raised by the Rust core."
);

fn py_err(e: Error) -> PyErr {
    AvatarError::new_err(format!("{}: {e}", e.kind()))
}

fn tensor_err(e: candle_core::Error) -> PyErr {
    py_err(e.into())
}

fn to_py_json(py: Python<'_>, value: &impl serde::Serialize) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| py_err(e.into()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn vector(v: Vec<f64>) -> PyResult<Tensor> {
    let n = v.len();
    Tensor::from_vec(v, n, &Device::Cpu).map_err(tensor_err)
}

fn values(t: &Tensor) -> PyResult<Vec<f64>> {
    t.flatten_all().and_then(|t| t.to_vec1()).map_err(tensor_err)
}

/// Model and training configuration.
#[pyclass(name = "Config", module = "avatar_diffusion_py")]
pub struct PyConfig {
    inner: ModelConfig,
}

#[pymethods]
impl PyConfig {
    /// Small CPU preset.
    #[staticmethod]
    fn toy() -> Self {
        Self {
            inner: ModelConfig::toy(),
        }
    }

    /// Full-scale preset.
    #[staticmethod]
    fn full() -> Self {
        Self {
            inner: ModelConfig::full_scale(),
        }
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: ModelConfig::from_json_str(text).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn from_file(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: ModelConfig::from_file(path).map_err(py_err)?,
        })
    }

    fn to_json(&self) -> String {
        self.inner.to_json_pretty()
    }

    /// Hex SHA-256 of the canonical JSON.
    fn hash(&self) -> String {
        self.inner.hash()
    }

    /// Copy with a different seed.
    fn with_seed(&self, seed: u64) -> Self {
        let mut inner = self.inner.clone();
        inner.seed = seed;
        Self { inner }
    }

    #[getter]
    fn clip_len(&self) -> usize {
        self.inner.clip_len
    }

    #[getter]
    fn motion_frame_len(&self) -> usize {
        self.inner.motion_frame_len
    }

    #[getter]
    fn fps(&self) -> f64 {
        self.inner.fps
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn latent_shape(&self) -> (usize, usize, usize) {
        (
            self.inner.latent_channels,
            self.inner.latent_height,
            self.inner.latent_width,
        )
    }

    #[getter]
    fn noise_steps(&self) -> usize {
        self.inner.noise_steps
    }

    #[getter]
    fn guidance(&self) -> (f64, f64) {
        (self.inner.guidance.audio_ratio, self.inner.guidance.ref_ratio)
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(clip_len={}, motion_frame_len={}, hash={}...)",
            self.inner.clip_len,
            self.inner.motion_frame_len,
            &self.inner.hash()[..12]
        )
    }
}

/// Linear DDPM noise schedule.
#[pyclass(name = "DiffusionSchedule", module = "avatar_diffusion_py")]
pub struct PySchedule {
    inner: DiffusionSchedule,
}

#[pymethods]
impl PySchedule {
    #[new]
    #[pyo3(signature = (beta_start=1e-4, beta_end=2e-2, steps=1000))]
    fn new(beta_start: f64, beta_end: f64, steps: usize) -> PyResult<Self> {
        Ok(Self {
            inner: DiffusionSchedule::linear(beta_start, beta_end, steps).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn from_config(config: &PyConfig) -> PyResult<Self> {
        Ok(Self {
            inner: DiffusionSchedule::from_config(&config.inner).map_err(py_err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn alpha_cumprod(&self) -> Vec<f64> {
        self.inner.alpha_cumprod.clone()
    }

    #[getter]
    fn betas(&self) -> Vec<f64> {
        self.inner.betas.clone()
    }

    /// Descending timesteps visited by an `n`-step sampler.
    fn sampling_timesteps(&self, n: usize) -> Vec<usize> {
        self.inner.sampling_timesteps(n)
    }

    /// Noised sample at step `t` from a clean sample and noise.
    fn add_noise(&self, z0: Vec<f64>, t: usize, eps: Vec<f64>) -> PyResult<Vec<f64>> {
        values(&noise(&vector(z0)?, t, &vector(eps)?, &self.inner).map_err(py_err)?)
    }

    /// Clean-sample estimate from a noised sample and its noise.
    fn predict_x0(&self, z_t: Vec<f64>, t: usize, eps: Vec<f64>) -> PyResult<Vec<f64>> {
        values(&x0(&vector(z_t)?, t, &vector(eps)?, &self.inner).map_err(py_err)?)
    }
}

/// Per-frame 2-D keypoints with the landmark roles needed by the metrics.
#[pyclass(name = "KeypointSequence", module = "avatar_diffusion_py")]
pub struct PyKeypoints {
    inner: KeypointSequence,
}

#[pymethods]
impl PyKeypoints {
    #[new]
    #[pyo3(signature = (points, nose_index, upper_face_indices, mouth_indices=Vec::new()))]
    fn new(
        points: Vec<Vec<[f64; 2]>>,
        nose_index: usize,
        upper_face_indices: Vec<usize>,
        mouth_indices: Vec<usize>,
    ) -> PyResult<Self> {
        let index = KeypointIndexMap {
            nose_index,
            upper_face_indices,
            mouth_indices,
        };
        Ok(Self {
            inner: KeypointSequence::new(points, index).map_err(py_err)?,
        })
    }

    /// Reads the JSON-lines format written by `synth_dataset`.
    #[staticmethod]
    fn read_jsonl(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: KeypointSequence::read_jsonl(path).map_err(py_err)?,
        })
    }

    fn write_jsonl(&self, path: PathBuf) -> PyResult<()> {
        self.inner.write_jsonl(path).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.frames()
    }

    fn head_movement_variance(&self) -> PyResult<f64> {
        motion::head_movement_variance(&self.inner).map_err(py_err)
    }

    fn expression_variance(&self) -> PyResult<f64> {
        motion::expression_variance(&self.inner).map_err(py_err)
    }
}

/// Raw motion-frame index represented by each abstracted slot.
#[pyfunction]
fn tsm_schedule(config: &PyConfig) -> PyResult<Vec<usize>> {
    Ok(schedule_for(&config.inner).map_err(py_err)?.indices)
}

/// Three-pass guidance combination on flat vectors.
#[pyfunction]
#[pyo3(signature = (e_audio, e_ref, e_base, audio_ratio=5.0, ref_ratio=3.0))]
fn cfg_combine(
    e_audio: Vec<f64>,
    e_ref: Vec<f64>,
    e_base: Vec<f64>,
    audio_ratio: f64,
    ref_ratio: f64,
) -> PyResult<Vec<f64>> {
    let scales = GuidanceScales { audio_ratio, ref_ratio };
    values(&combine(&vector(e_audio)?, &vector(e_ref)?, &vector(e_base)?, scales).map_err(py_err)?)
}

/// `[n][D]` features to `[n][5][D]` neighbour windows, clamped at the ends.
#[pyfunction]
fn window_stack(features: Vec<Vec<f64>>) -> PyResult<Vec<Vec<Vec<f64>>>> {
    let n = features.len();
    let d = features.first().map_or(0, Vec::len);
    if features.iter().any(|f| f.len() != d) {
        return Err(AvatarError::new_err("ShapeMismatch: ragged feature rows"));
    }
    let t = Tensor::from_vec(features.concat(), (n, d), &Device::Cpu).map_err(tensor_err)?;
    stack_windows(&t).map_err(py_err)?.to_vec3().map_err(tensor_err)
}

/// Glo / Exp (and DGlo / DExp against `ground_truth`) as a dict.
#[pyfunction]
#[pyo3(signature = (generated, ground_truth=None, window=None))]
fn motion_metrics(
    py: Python<'_>,
    generated: &PyKeypoints,
    ground_truth: Option<PyRef<'_, PyKeypoints>>,
    window: Option<usize>,
) -> PyResult<Py<PyAny>> {
    let gt = ground_truth.as_ref().map(|g| &g.inner);
    let m = match window {
        Some(w) => motion::windowed_motion_metrics(&generated.inner, gt, w),
        None => motion::motion_metrics(&generated.inner, gt),
    }
    .map_err(py_err)?;
    to_py_json(py, &m)
}

/// Writes a procedural dataset to `out_dir`; returns its manifest.
#[pyfunction]
#[pyo3(signature = (out_dir, videos=4, frames=64, seed=0, config=None))]
fn synth_dataset(
    py: Python<'_>,
    out_dir: PathBuf,
    videos: usize,
    frames: usize,
    seed: u64,
    config: Option<&PyConfig>,
) -> PyResult<Py<PyAny>> {
    let cfg = config.map_or_else(ModelConfig::toy, |c| c.inner.clone());
    let manifest = py
        .detach(|| {
            let ds = synth(videos, frames, seed, &SynthOptions::for_config(&cfg)?)?;
            ds.save(out_dir)
        })
        .map_err(py_err)?;
    to_py_json(py, &manifest)
}

/// Trains one stage on a dataset directory and writes `checkpoint`.
/// Stage 2 needs `init`, a stage-1 checkpoint. Returns the loss report.
#[pyfunction]
#[pyo3(signature = (config, stage, data_dir, checkpoint, steps=200, init=None))]
fn train(
    py: Python<'_>,
    config: &PyConfig,
    stage: u8,
    data_dir: PathBuf,
    checkpoint: PathBuf,
    steps: usize,
    init: Option<PathBuf>,
) -> PyResult<Py<PyAny>> {
    let cfg = config.inner.clone();
    let report = py
        .detach(|| {
            let dev = Device::Cpu;
            let ds = SynthDataset::load(&data_dir)?;
            let td = TrainingData::from_dataset(&ds, &cfg, &extractor_for(&cfg), &dev)?;
            let opts = TrainOptions { steps, log_every: 0 };
            let (model, report) = match (stage, init) {
                (1, _) => train_stage1(&cfg, &td, &opts)?,
                (2, Some(path)) => train_stage2(&cfg, &td, &Checkpoint::load(path, &dev)?, &opts)?,
                (2, None) => {
                    return Err(Error::CheckpointMismatch(
                        "stage 2 needs a stage-1 init checkpoint".into(),
                    ))
                }
                (s, _) => return Err(Error::Format(format!("stage must be 1 or 2, got {s}"))),
            };
            checkpoint_with_step(&model, steps).save(&checkpoint)?;
            Ok(report)
        })
        .map_err(py_err)?;
    to_py_json(py, &report)
}

/// Generates PNG frames into `out_dir`; returns the run manifest.
#[pyfunction]
#[pyo3(signature = (checkpoint, audio, reference, out_dir, seconds=None, seed=0))]
fn infer(
    py: Python<'_>,
    checkpoint: PathBuf,
    audio: PathBuf,
    reference: PathBuf,
    out_dir: PathBuf,
    seconds: Option<f64>,
    seed: u64,
) -> PyResult<Py<PyAny>> {
    let req = InferRequest {
        checkpoint,
        audio,
        reference,
        seconds,
        seed,
        out_dir,
    };
    let manifest = py.detach(|| run_infer(&req)).map_err(py_err)?;
    to_py_json(py, &manifest)
}

#[pymodule]
fn avatar_diffusion_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("AvatarError", m.py().get_type::<AvatarError>())?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PySchedule>()?;
    m.add_class::<PyKeypoints>()?;
    m.add_function(wrap_pyfunction!(tsm_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(cfg_combine, m)?)?;
    m.add_function(wrap_pyfunction!(window_stack, m)?)?;
    m.add_function(wrap_pyfunction!(motion_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(synth_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(infer, m)?)?;
    Ok(())
}
