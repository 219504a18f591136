//! Python bindings: configs, the pipeline commands, inference on a
//! checkpoint and the loss/metric functions. Structured results cross
//! the boundary as JSON-decoded Python objects.

use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::Serialize;

use mvpt_core::config::RunConfig;
use mvpt_core::diffcore::{Graph, Tensor};
use mvpt_core::metrics::{auroc_macro_ovr, Metrics};
use mvpt_core::multiview::losses;
use mvpt_core::multiview::train::{infer_backbone, infer_pair};
use mvpt_core::pipeline::{self, EvalSplit, BACKBONE};
use mvpt_core::swinlite::checkpoint::load_checkpoint;
use mvpt_core::swinlite::ModelState;
use mvpt_core::Error;

fn err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        e if e.is_usage() => PyValueError::new_err(e.to_string()),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

/// Run configuration. Starts from the toy or full-scale preset.
#[pyclass(name = "Config", module = "mvpt", frozen)]
struct PyConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (full_scale = false))]
    fn new(full_scale: bool) -> Self {
        let inner = if full_scale { RunConfig::full_scale() } else { RunConfig::toy() };
        PyConfig { inner }
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        RunConfig::from_json(text).map(|inner| PyConfig { inner }).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        RunConfig::load(&path).map(|inner| PyConfig { inner }).map_err(err)
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    /// New config with `key=value` overrides, keys as on the command line.
    #[pyo3(signature = (**kwargs))]
    fn with_overrides(&self, kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut pairs = Vec::new();
        if let Some(kw) = kwargs {
            let json = kw.py().import("json")?;
            for (k, v) in kw.iter() {
                let key: String = k.extract()?;
                let value: String = json.call_method1("dumps", (v,))?.extract()?;
                pairs.push((key, value));
            }
        }
        self.inner.with_overrides(&pairs).map(|inner| PyConfig { inner }).map_err(err)
    }

    fn with_paths(&self, data_dir: PathBuf, out_dir: PathBuf) -> Self {
        let mut inner = self.inner.clone();
        inner.data_dir = data_dir;
        inner.out_dir = out_dir;
        PyConfig { inner }
    }

    #[getter]
    fn image_side(&self) -> usize {
        self.inner.image_side()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.backbone.num_classes
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(subjects={}, prompt_length={}, tau={}, lambda={})",
            self.inner.subjects, self.inner.prompt.length, self.inner.tau, self.inner.lambda
        )
    }
}

/// A stage-1 or stage-2 checkpoint ready for inference.
#[pyclass(name = "Model", module = "mvpt", frozen)]
struct PyModel {
    state: ModelState<f32>,
    cfg: RunConfig,
}

impl PyModel {
    fn image(&self, pixels: Vec<f32>) -> PyResult<Tensor<f32>> {
        let side = self.cfg.image_side();
        if pixels.len() != side * side {
            return Err(PyValueError::new_err(format!(
                "expected {} pixels for a {side}×{side} image, got {}",
                side * side,
                pixels.len()
            )));
        }
        Tensor::new(vec![1, side, side], pixels).map_err(err)
    }
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf, config: &PyConfig) -> PyResult<Self> {
        let (state, _) = load_checkpoint::<f32>(&path).map_err(err)?;
        Ok(PyModel {
            state,
            cfg: config.inner.clone(),
        })
    }

    /// True for a tuned (stage-2) checkpoint.
    #[getter]
    fn prompted(&self) -> bool {
        self.state.contains("head.multi.weight")
    }

    fn tensor_names(&self) -> Vec<String> {
        self.state.names().to_vec()
    }

    /// SHA-256 of every backbone tensor.
    fn backbone_digest(&self) -> String {
        self.state.digest(BACKBONE)
    }

    /// Single-view logits of one row-major image.
    fn predict_single(&self, image: Vec<f32>) -> PyResult<Vec<f64>> {
        infer_backbone(&self.state, &self.cfg.backbone, &self.image(image)?).map_err(err)
    }

    /// `(y_mlo, y_cc, y_mv)` logits of an image pair; needs a tuned checkpoint.
    fn predict_pair(&self, mlo: Vec<f32>, cc: Vec<f32>) -> PyResult<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let (mlo, cc) = (self.image(mlo)?, self.image(cc)?);
        infer_pair(&self.state, &self.cfg.backbone, &self.cfg.prompt, &mlo, &cc).map_err(err)
    }
}

#[pyfunction]
fn synth(py: Python<'_>, config: &PyConfig) -> PyResult<Py<PyAny>> {
    to_py(py, &pipeline::cmd_synth(&config.inner).map_err(err)?)
}

#[pyfunction]
fn pretrain(py: Python<'_>, config: &PyConfig) -> PyResult<Py<PyAny>> {
    to_py(py, &pipeline::cmd_pretrain(&config.inner).map_err(err)?)
}

#[pyfunction]
#[pyo3(signature = (config, checkpoint = None, fold = None))]
fn tune(py: Python<'_>, config: &PyConfig, checkpoint: Option<PathBuf>, fold: Option<usize>) -> PyResult<Py<PyAny>> {
    let ckpt = checkpoint.unwrap_or_else(|| pipeline::stage1_path(&config.inner));
    to_py(py, &pipeline::cmd_tune(&config.inner, &ckpt, fold).map_err(err)?)
}

#[pyfunction]
#[pyo3(signature = (config, checkpoint = None, split = "test", fold = None))]
fn evaluate(
    py: Python<'_>,
    config: &PyConfig,
    checkpoint: Option<PathBuf>,
    split: &str,
    fold: Option<usize>,
) -> PyResult<Py<PyAny>> {
    let split = EvalSplit::parse(split).map_err(err)?;
    let out = pipeline::cmd_eval(&config.inner, checkpoint.as_deref().map(Path::new), split, fold).map_err(err)?;
    to_py(py, &out)
}

#[pyfunction]
fn audit(py: Python<'_>, config: &PyConfig) -> PyResult<Py<PyAny>> {
    to_py(py, &pipeline::cmd_audit(&config.inner).map_err(err)?)
}

#[pyfunction]
fn gradcheck(py: Python<'_>, config: &PyConfig) -> PyResult<Py<PyAny>> {
    to_py(py, &pipeline::cmd_gradcheck(&config.inner, None).map_err(err)?)
}

#[pyfunction]
fn stage1_path(config: &PyConfig) -> PathBuf {
    pipeline::stage1_path(&config.inner)
}

fn row(g: &mut Graph<f64>, logits: Vec<f64>) -> PyResult<mvpt_core::diffcore::Var> {
    let k = logits.len();
    Ok(g.constant(Tensor::new(vec![1, k], logits).map_err(err)?))
}

/// `KL(softmax(t/τ) ‖ softmax(s/τ))`.
#[pyfunction]
#[pyo3(signature = (teacher, student, tau = 4.0))]
fn l_kd(teacher: Vec<f64>, student: Vec<f64>, tau: f64) -> PyResult<f64> {
    let mut g = Graph::new();
    let (t, s) = (row(&mut g, teacher)?, row(&mut g, student)?);
    let v = losses::l_kd(&mut g, t, s, tau).map_err(err)?;
    Ok(g.value(v).data()[0])
}

/// Mutual-distillation loss of one sample's three logit vectors.
#[pyfunction]
#[pyo3(signature = (y_mlo, y_cc, y_mv, tau = 4.0))]
fn l_md(y_mlo: Vec<f64>, y_cc: Vec<f64>, y_mv: Vec<f64>, tau: f64) -> PyResult<f64> {
    let mut g = Graph::new();
    let (a, b, c) = (row(&mut g, y_mlo)?, row(&mut g, y_cc)?, row(&mut g, y_mv)?);
    let v = losses::l_md(&mut g, a, b, c, tau).map_err(err)?;
    Ok(g.value(v).data()[0])
}

/// Macro one-vs-rest AUROC of per-sample class probabilities.
#[pyfunction]
fn auroc(probs: Vec<Vec<f64>>, labels: Vec<usize>, num_classes: usize) -> PyResult<f64> {
    auroc_macro_ovr(&probs, &labels, num_classes).map_err(err)
}

/// Accuracy, macro precision/recall/F1 and macro AUROC.
#[pyfunction]
fn metrics(py: Python<'_>, probs: Vec<Vec<f64>>, labels: Vec<usize>, num_classes: usize) -> PyResult<Py<PyAny>> {
    to_py(py, &Metrics::evaluate(&probs, &labels, num_classes).map_err(err)?)
}

#[pymodule]
pub fn mvpt(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(tune, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(audit, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(stage1_path, m)?)?;
    m.add_function(wrap_pyfunction!(l_kd, m)?)?;
    m.add_function(wrap_pyfunction!(l_md, m)?)?;
    m.add_function(wrap_pyfunction!(auroc, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    Ok(())
}
