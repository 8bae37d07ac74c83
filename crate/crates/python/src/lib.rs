//! Python bindings for the recurrent U-Net engine.
//!
//! Images cross the boundary as flat row-major `float` lists plus a
//! `(channels, height, width)` shape, which keeps the module free of any
//! array-library dependency.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use runet_core::data::{synth, Sample, Split, SynthTask};
use runet_core::recurrent::foreground_probability;
use runet_core::train::eval::predict_image;
use runet_core::train::{self, load_checkpoint, save_checkpoint, TrainConfig};
use runet_core::{Error, ModelConfig, RecurrentUNet, Tensor, Variant};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::Image { .. } => PyOSError::new_err(e.to_string()),
        e if e.is_config() => PyValueError::new_err(e.to_string()),
        Error::Shape { .. } | Error::Domain { .. } | Error::Dataset(_) => PyValueError::new_err(e.to_string()),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

fn image_tensor(data: Vec<f32>, shape: (usize, usize, usize)) -> PyResult<Tensor<f32>> {
    let (c, h, w) = shape;
    Tensor::new(vec![c, h, w], data).map_err(to_py)
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(to_py)
}

/// A recurrent U-Net held in single precision.
#[pyclass(name = "Model", module = "runet")]
struct PyModel {
    inner: RecurrentUNet<f32>,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (variant = "dru", level = 4, iterations = 3, base_channels = 8, image_channels = 3, seed = 0))]
    fn new(
        variant: &str,
        level: usize,
        iterations: usize,
        base_channels: usize,
        image_channels: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let variant: Variant = parse(variant)?;
        let mut cfg = ModelConfig::new(variant)
            .with_iterations(iterations)
            .with_base_channels(base_channels)
            .with_image_channels(image_channels);
        if variant.uses_level() {
            cfg.level = level;
        }
        let inner = RecurrentUNet::new(cfg, seed).map_err(to_py)?;
        Ok(PyModel { inner })
    }

    /// Loads a single-precision checkpoint written by `save` or the CLI.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = load_checkpoint::<f32>(&path).map_err(to_py)?;
        Ok(PyModel {
            inner: ck.model().map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&path, &self.inner, None).map_err(to_py)
    }

    #[getter]
    fn variant(&self) -> &'static str {
        self.inner.config.variant.name()
    }

    #[getter]
    fn level(&self) -> usize {
        self.inner.config.level
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.inner.config.iterations
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.count_parameters()
    }

    /// Foreground probabilities `H*W` for each recurrence step.
    #[pyo3(signature = (image, shape, iterations = None))]
    fn predict(
        &self,
        image: Vec<f32>,
        shape: (usize, usize, usize),
        iterations: Option<usize>,
    ) -> PyResult<Vec<Vec<f32>>> {
        let img = image_tensor(image, shape)?;
        let n = iterations.unwrap_or(self.inner.config.iterations);
        let steps = predict_image(&self.inner, &img, n, None).map_err(to_py)?;
        steps
            .iter()
            .map(|l| {
                foreground_probability(l, self.inner.config.n_classes)
                    .map(|p| p.data().to_vec())
                    .map_err(to_py)
            })
            .collect()
    }

    /// Trains on a freshly generated synthetic task and returns the
    /// last-step validation mIoU of every epoch.
    #[pyo3(signature = (task = "blobs", train_count = 32, val_count = 8, size = 32, epochs = 1, batch_size = 4, alpha = 1.0, seed = 0))]
    #[allow(clippy::too_many_arguments)]
    fn fit_synthetic(
        &mut self,
        task: &str,
        train_count: usize,
        val_count: usize,
        size: usize,
        epochs: usize,
        batch_size: usize,
        alpha: f64,
        seed: u64,
    ) -> PyResult<Vec<f64>> {
        let task: SynthTask = parse(task)?;
        let ch = self.inner.config.image_channels;
        let tr = synth::generate(task, seed, Split::Train, train_count, size, size, ch).map_err(to_py)?;
        let va = synth::generate(task, seed, Split::Val, val_count, size, size, ch).map_err(to_py)?;
        let cfg = TrainConfig {
            epochs,
            batch_size,
            alpha,
            seed,
            ..Default::default()
        };
        let out = train::train(&mut self.inner, &tr, &va, &cfg, None, &mut |_| {}).map_err(to_py)?;
        Ok(out
            .epochs
            .iter()
            .map(|e| e.val.last().map_or(0.0, |m| m.report.miou))
            .collect())
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(variant='{}', level={}, iterations={}, parameters={})",
            self.variant(),
            self.level(),
            self.iterations(),
            self.parameter_count()
        )
    }
}

/// Per-step loss weights `alpha^(N - t)`.
#[pyfunction]
fn iteration_weights(n: usize, alpha: f64) -> PyResult<Vec<f64>> {
    train::iteration_weights(n, alpha).map_err(to_py)
}

/// Binary segmentation metrics of flat probability and ground-truth lists.
#[pyfunction]
#[pyo3(signature = (prob, gt, threshold = 0.5))]
fn compute_metrics<'py>(py: Python<'py>, prob: Vec<f32>, gt: Vec<f32>, threshold: f64) -> PyResult<Bound<'py, PyDict>> {
    let r = runet_core::data::compute_metrics(&prob, &gt, threshold).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("miou", r.miou)?;
    d.set_item("mrec", r.mrec)?;
    d.set_item("mprec", r.mprec)?;
    d.set_item("f1", r.f1)?;
    d.set_item("fg_iou", r.fg_iou)?;
    d.set_item("fg_precision", r.fg_precision)?;
    d.set_item("fg_recall", r.fg_recall)?;
    d.set_item("fg_f1", r.fg_f1)?;
    d.set_item("pr_break_even", r.pr_break_even)?;
    d.set_item("tp", r.confusion.tp)?;
    d.set_item("fp", r.confusion.fp)?;
    d.set_item("tn", r.confusion.tn)?;
    d.set_item("fn", r.confusion.fn_)?;
    Ok(d)
}

/// One synthetic sample as `(image, mask)` flat lists; the image has shape
/// `(channels, height, width)`.
#[pyfunction]
#[pyo3(signature = (task, index, height = 64, width = 64, channels = 3, seed = 0, split = "train"))]
fn synth_sample(
    task: &str,
    index: usize,
    height: usize,
    width: usize,
    channels: usize,
    seed: u64,
    split: &str,
) -> PyResult<(Vec<f32>, Vec<f32>)> {
    let s: Sample =
        synth::generate_one(parse(task)?, seed, parse(split)?, index, height, width, channels).map_err(to_py)?;
    Ok((s.image.data().to_vec(), s.mask.data().to_vec()))
}

#[pymodule]
fn runet(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(iteration_weights, m)?)?;
    m.add_function(wrap_pyfunction!(compute_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(synth_sample, m)?)?;
    Ok(())
}
