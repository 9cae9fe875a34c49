//! Python bindings: event I/O, voxelization, simulation, clustering,
//! augmentation geometry, and a resumable training session.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use evpretrain::augment::{build_correspondence, sample_affine, AugmentConfig, PatchGrid};
use evpretrain::checkpoint::Container;
use evpretrain::config::{split_override, Config};
use evpretrain::context::kmeans as kmeans_rs;
use evpretrain::event::{self, Event, EventImage, EventStream, Polarity};
use evpretrain::geometry::Affine2;
use evpretrain::rng::seeded;
use evpretrain::sim::{self, DatasetManifest, Frame, SimConfig, Split};
use evpretrain::tensor::{self, Tensor};
use evpretrain::train::{load_event_images, LossReport, Trainer};
use evpretrain::Error;

type RawEvent = (u64, u16, u16, i8);

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        Error::NonFinite { .. } | Error::Diverged { .. } => PyRuntimeError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn stream_from(width: u16, height: u16, events: Vec<RawEvent>) -> PyResult<EventStream> {
    let events = events
        .into_iter()
        .map(|(t, x, y, p)| {
            Polarity::from_sign(p)
                .map(|pol| Event::new(t, x, y, pol))
                .ok_or_else(|| PyValueError::new_err(format!("polarity must be +1 or -1, got {p}")))
        })
        .collect::<PyResult<Vec<_>>>()?;
    EventStream::from_unsorted(width, height, events).map_err(to_py)
}

fn stream_to(stream: &EventStream) -> Vec<RawEvent> {
    stream
        .events()
        .iter()
        .map(|e| (e.t, e.x, e.y, e.polarity.sign()))
        .collect()
}

/// Voxel grid of `(t, x, y, p)` events; returns `(shape, flat values)`.
#[pyfunction]
#[pyo3(signature = (events, width, height, bins=5))]
fn voxelize(events: Vec<RawEvent>, width: u16, height: u16, bins: usize) -> PyResult<(Vec<usize>, Vec<f64>)> {
    let grid = event::voxelize(&stream_from(width, height, events)?, bins).map_err(to_py)?;
    Ok((vec![grid.bins, grid.height, grid.width], grid.values))
}

/// Standardized event image of `(t, x, y, p)` events; returns `(shape, flat values)`.
#[pyfunction]
#[pyo3(signature = (events, width, height, bins=5))]
fn event_image(events: Vec<RawEvent>, width: u16, height: u16, bins: usize) -> PyResult<(Vec<usize>, Vec<f32>)> {
    let grid = event::voxelize(&stream_from(width, height, events)?, bins).map_err(to_py)?;
    let img = event::to_event_image(&grid);
    Ok((vec![img.channels, img.height, img.width], img.data))
}

/// `(width, height, events)` from an EVS1 file.
#[pyfunction]
fn read_events(path: PathBuf) -> PyResult<(u16, u16, Vec<RawEvent>)> {
    let s = event::read_events(&path).map_err(to_py)?;
    Ok((s.width(), s.height(), stream_to(&s)))
}

#[pyfunction]
fn write_events(path: PathBuf, width: u16, height: u16, events: Vec<RawEvent>) -> PyResult<()> {
    event::write_events(&path, &stream_from(width, height, events)?).map_err(to_py)
}

/// Events from row-major intensity frames (values in `[0, 1]`).
#[pyfunction]
#[pyo3(signature = (frames, width, height, timestamps, contrast_threshold=0.2, refractory_us=0, noise_rate_hz=0.0, seed=0))]
#[allow(clippy::too_many_arguments)]
fn simulate_from_frames(
    frames: Vec<Vec<f32>>,
    width: usize,
    height: usize,
    timestamps: Vec<u64>,
    contrast_threshold: f64,
    refractory_us: u64,
    noise_rate_hz: f64,
    seed: u64,
) -> PyResult<Vec<RawEvent>> {
    let frames = frames
        .into_iter()
        .map(|f| Frame::new(width, height, f))
        .collect::<evpretrain::Result<Vec<_>>>()
        .map_err(to_py)?;
    let config = SimConfig {
        contrast_threshold,
        refractory_us,
        noise_rate_hz,
        seed,
        ..SimConfig::default()
    };
    let s = sim::simulate_from_frames(&frames, &timestamps, &config).map_err(to_py)?;
    Ok(stream_to(&s))
}

/// K-means++ / Lloyd on row vectors; returns `(labels, centers, objective_trace)`.
#[pyfunction]
#[pyo3(signature = (features, k, iters=10, seed=0))]
fn kmeans(features: Vec<Vec<f64>>, k: usize, iters: usize, seed: u64) -> PyResult<(Vec<usize>, Vec<Vec<f64>>, Vec<f64>)> {
    let d = features.first().map_or(0, Vec::len);
    if features.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("feature rows must have equal length"));
    }
    let t = Tensor::new(vec![features.len(), d], features.concat()).map_err(to_py)?;
    let r = kmeans_rs(&t, k, iters, &mut seeded(seed)).map_err(to_py)?;
    let labels = r.assignment.labels.iter().map(|l| l.unwrap_or(0)).collect();
    let centers = (0..k).map(|i| r.contexts.centers.row(i).to_vec()).collect();
    Ok((labels, centers, r.objective_trace))
}

/// Random augmentation affine (default ranges) as a 2×3 matrix.
#[pyfunction]
fn random_affine(seed: u64, width: usize, height: usize) -> Vec<Vec<f64>> {
    let t = sample_affine(&mut seeded(seed), &AugmentConfig::default(), width, height);
    t.m.iter().map(|r| r.to_vec()).collect()
}

/// Patch correspondence for a 2×3 affine mapping x★ pixels to x⁺ pixels.
#[pyfunction]
fn correspondence(matrix: Vec<Vec<f64>>, height: usize, width: usize, patch: usize) -> PyResult<Vec<Option<usize>>> {
    if matrix.len() != 2 || matrix.iter().any(|r| r.len() != 3) {
        return Err(PyValueError::new_err("matrix must be 2x3"));
    }
    let t = Affine2 {
        m: [
            [matrix[0][0], matrix[0][1], matrix[0][2]],
            [matrix[1][0], matrix[1][1], matrix[1][2]],
        ],
    };
    let grid = PatchGrid::new(height, width, patch).map_err(to_py)?;
    Ok(build_correspondence(&t, &grid, height, width).map_err(to_py)?.map)
}

#[pyfunction]
#[pyo3(signature = (logits, temperature=1.0))]
fn softmax(logits: Vec<f64>, temperature: f64) -> PyResult<Vec<f64>> {
    let t = Tensor::from_vec(logits);
    Ok(tensor::softmax(&t, 0, temperature).map_err(to_py)?.into_data())
}

fn load_config(overrides: &[String], path: Option<PathBuf>) -> PyResult<Config> {
    let pairs = overrides
        .iter()
        .map(|s| split_override(s))
        .collect::<evpretrain::Result<Vec<_>>>()
        .map_err(to_py)?;
    Config::load(path.as_deref(), &pairs).map_err(to_py)
}

/// Packs a simulated dataset into `out_dir`; returns the manifest path.
#[pyfunction]
#[pyo3(signature = (out_dir, overrides=Vec::new(), config_path=None))]
fn simulate_dataset(out_dir: PathBuf, overrides: Vec<String>, config_path: Option<PathBuf>) -> PyResult<PathBuf> {
    let config = load_config(&overrides, config_path)?;
    let sources = config.sim.sources().map_err(to_py)?;
    sim::pack_dataset(&sources, &out_dir, &config.sim).map_err(to_py)?;
    Ok(out_dir.join(DatasetManifest::FILE_NAME))
}

fn report_dict<'py>(py: Python<'py>, r: &LossReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("step", r.step)?;
    d.set_item("l_patch", r.l_patch)?;
    d.set_item("l_context", r.l_context)?;
    d.set_item("l_image", r.l_image)?;
    d.set_item("l_total", r.l_total)?;
    d.set_item("teacher_entropy", r.teacher_entropy)?;
    d.set_item("lr", r.lr)?;
    d.set_item("momentum", r.momentum)?;
    Ok(d)
}

/// Pretraining on a dataset manifest, one step at a time.
#[pyclass]
struct TrainSession {
    trainer: Trainer<f32>,
    data: Vec<EventImage>,
}

fn load_data(manifest: &str, trainer: &Trainer<f32>) -> PyResult<Vec<EventImage>> {
    let m = DatasetManifest::load(manifest).map_err(to_py)?;
    load_event_images(&m, Split::Pretrain, &trainer.config.model).map_err(to_py)
}

#[pymethods]
impl TrainSession {
    /// `overrides` are dotted `key=value` strings, e.g. `"train.batch_size=4"`.
    #[new]
    #[pyo3(signature = (manifest, overrides=Vec::new(), config_path=None))]
    fn new(manifest: String, overrides: Vec<String>, config_path: Option<PathBuf>) -> PyResult<Self> {
        let mut config = load_config(&overrides, config_path)?;
        config.train.manifest = manifest.clone();
        let trainer = Trainer::new(config.train).map_err(to_py)?;
        let data = load_data(&manifest, &trainer)?;
        Ok(Self { trainer, data })
    }

    /// Resumes from a checkpoint; the dataset comes from its stored config.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let c = Container::load(&path).map_err(to_py)?;
        let trainer = Trainer::from_checkpoint(&c).map_err(to_py)?;
        let manifest = trainer.config.manifest.clone();
        let data = load_data(&manifest, &trainer)?;
        Ok(Self { trainer, data })
    }

    fn step<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let r = self.trainer.train_step(&self.data).map_err(to_py)?;
        report_dict(py, &r)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.trainer
            .to_checkpoint()
            .and_then(|c| c.save(&path))
            .map_err(to_py)
    }

    #[getter]
    fn step_count(&self) -> u64 {
        self.trainer.step
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.trainer.pair.student.numel()
    }

    /// Named teacher parameter as `(shape, flat values)`.
    fn teacher_tensor(&self, name: &str) -> PyResult<(Vec<usize>, Vec<f32>)> {
        let t = self
            .trainer
            .pair
            .teacher
            .get(name)
            .ok_or_else(|| PyValueError::new_err(format!("no parameter named {name:?}")))?;
        Ok((t.shape().to_vec(), t.data().to_vec()))
    }
}

#[pymodule]
fn evpretrain_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(voxelize, m)?)?;
    m.add_function(wrap_pyfunction!(event_image, m)?)?;
    m.add_function(wrap_pyfunction!(read_events, m)?)?;
    m.add_function(wrap_pyfunction!(write_events, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_from_frames, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(kmeans, m)?)?;
    m.add_function(wrap_pyfunction!(random_affine, m)?)?;
    m.add_function(wrap_pyfunction!(correspondence, m)?)?;
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_class::<TrainSession>()?;
    Ok(())
}
