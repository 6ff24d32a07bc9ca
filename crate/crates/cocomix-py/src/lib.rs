//! Python bindings: the autodiff tensor and the full experiment pipeline.

use std::path::PathBuf;

use pyo3::exceptions::{PyFileNotFoundError, PyIndexError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use cocomix_core::persist::{LabelMode, LabelSource, SignRule};
use cocomix_core::pipeline::{ExperimentConfig, Pipeline, StageReport, SteerArgs};
use cocomix_core::tensor;
use cocomix_core::train::Method;
use cocomix_core::Error;

fn to_py(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::InvalidConfig(_) => PyValueError::new_err(msg),
        Error::MissingPrerequisite(_) => PyFileNotFoundError::new_err(msg),
        Error::IndexOutOfRange { .. } => PyIndexError::new_err(msg),
        _ => PyRuntimeError::new_err(msg),
    }
}

fn parse_method(name: &str) -> PyResult<Method> {
    name.parse().map_err(to_py)
}

/// Row-major tensor with reverse-mode gradients, rank 2 at most.
#[pyclass(name = "Tensor", unsendable)]
struct PyTensor {
    inner: tensor::Tensor,
}

#[pymethods]
impl PyTensor {
    #[new]
    #[pyo3(signature = (shape, values, requires_grad = false))]
    fn new(shape: Vec<usize>, values: Vec<f64>, requires_grad: bool) -> PyResult<Self> {
        let inner = tensor::Tensor::leaf(&shape, values, requires_grad).map_err(to_py)?;
        Ok(PyTensor { inner })
    }

    #[staticmethod]
    fn zeros(shape: Vec<usize>) -> PyResult<Self> {
        Ok(PyTensor { inner: tensor::Tensor::zeros(&shape, false).map_err(to_py)? })
    }

    fn shape(&self) -> Vec<usize> {
        self.inner.shape()
    }

    fn values(&self) -> Vec<f64> {
        self.inner.values()
    }

    /// Gradient accumulated by backward; None before any backward pass.
    fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad()
    }

    fn matmul(&self, other: &PyTensor) -> PyResult<PyTensor> {
        Ok(PyTensor { inner: self.inner.matmul(&other.inner).map_err(to_py)? })
    }

    fn add(&self, other: &PyTensor) -> PyResult<PyTensor> {
        Ok(PyTensor { inner: self.inner.add(&other.inner).map_err(to_py)? })
    }

    fn mul(&self, other: &PyTensor) -> PyResult<PyTensor> {
        Ok(PyTensor { inner: self.inner.mul(&other.inner).map_err(to_py)? })
    }

    fn scale(&self, factor: f64) -> PyResult<PyTensor> {
        Ok(PyTensor { inner: self.inner.scale(factor).map_err(to_py)? })
    }

    fn gelu(&self) -> PyResult<PyTensor> {
        Ok(PyTensor { inner: self.inner.gelu().map_err(to_py)? })
    }

    fn softmax(&self) -> PyResult<PyTensor> {
        Ok(PyTensor { inner: self.inner.softmax().map_err(to_py)? })
    }

    /// Keeps the k largest-magnitude entries per row, zeroing the rest.
    fn topk_mask(&self, k: usize) -> PyResult<PyTensor> {
        Ok(PyTensor { inner: self.inner.topk_mask(k).map_err(to_py)? })
    }

    fn reduce_mean(&self) -> PyResult<PyTensor> {
        Ok(PyTensor { inner: self.inner.reduce_mean().map_err(to_py)? })
    }

    /// Scalar value of a 1x1 tensor.
    fn item(&self) -> f64 {
        self.inner.item()
    }

    /// Backpropagates from this scalar into every reachable leaf.
    fn backward(&self) -> PyResult<()> {
        tensor::backward(&self.inner).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

fn report_to_dict<'py>(py: Python<'py>, report: &StageReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("stage", &report.stage)?;
    d.set_item("manifest", report.manifest.to_string_lossy())?;
    d.set_item(
        "outputs",
        report.outputs.iter().map(|p| p.to_string_lossy().into_owned()).collect::<Vec<_>>(),
    )?;
    d.set_item("notes", &report.notes)?;
    Ok(d)
}

/// One experiment: a config file plus the stage operations it drives.
#[pyclass(name = "Experiment")]
struct PyExperiment {
    pipeline: Pipeline,
}

#[pymethods]
impl PyExperiment {
    #[new]
    #[pyo3(signature = (config_path, out_dir = None))]
    fn new(config_path: PathBuf, out_dir: Option<PathBuf>) -> PyResult<Self> {
        let mut config = ExperimentConfig::load(&config_path).map_err(to_py)?;
        if let Some(dir) = out_dir {
            config.out_dir = dir;
        }
        Ok(PyExperiment { pipeline: Pipeline::new(config).map_err(to_py)? })
    }

    /// Builds an experiment from TOML text instead of a file.
    #[staticmethod]
    #[pyo3(signature = (text, out_dir = None))]
    fn from_toml(text: &str, out_dir: Option<PathBuf>) -> PyResult<Self> {
        let mut config: ExperimentConfig =
            toml_from_str(text).map_err(|e| PyValueError::new_err(e))?;
        if let Some(dir) = out_dir {
            config.out_dir = dir;
        }
        Ok(PyExperiment { pipeline: Pipeline::new(config).map_err(to_py)? })
    }

    #[getter]
    fn out_dir(&self) -> String {
        self.pipeline.paths.root.to_string_lossy().into_owned()
    }

    /// Directory name a run gets under runs/, e.g. for compare().
    #[pyo3(signature = (method, seed = None))]
    fn run_name(&self, method: &str, seed: Option<u64>) -> PyResult<String> {
        Ok(self.pipeline.run_name(parse_method(method)?, seed))
    }

    fn gen_corpus<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        report_to_dict(py, &self.pipeline.gen_corpus().map_err(to_py)?)
    }

    fn train_teacher<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        report_to_dict(py, &self.pipeline.train_teacher().map_err(to_py)?)
    }

    fn dump_acts<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        report_to_dict(py, &self.pipeline.dump_acts().map_err(to_py)?)
    }

    fn train_sae<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        report_to_dict(py, &self.pipeline.train_sae().map_err(to_py)?)
    }

    #[pyo3(signature = (source = "attribution", rule = "signed"))]
    fn make_labels<'py>(
        &self,
        py: Python<'py>,
        source: &str,
        rule: &str,
    ) -> PyResult<Bound<'py, PyDict>> {
        let source = match source {
            "attribution" => LabelSource::Attribution,
            "activation" => LabelSource::Activation,
            other => return Err(PyValueError::new_err(format!("unknown label source {other}"))),
        };
        let rule = match rule {
            "signed" => SignRule::Signed,
            "absolute" => SignRule::Absolute,
            other => return Err(PyValueError::new_err(format!("unknown sign rule {other}"))),
        };
        let mode = LabelMode { source, rule };
        report_to_dict(py, &self.pipeline.make_labels(mode).map_err(to_py)?)
    }

    #[pyo3(signature = (method, seed = None, stop_after = None, resume = false))]
    fn pretrain<'py>(
        &self,
        py: Python<'py>,
        method: &str,
        seed: Option<u64>,
        stop_after: Option<usize>,
        resume: bool,
    ) -> PyResult<Bound<'py, PyDict>> {
        let method = parse_method(method)?;
        report_to_dict(py, &self.pipeline.pretrain(method, seed, stop_after, resume).map_err(to_py)?)
    }

    #[pyo3(signature = (method, seed = None))]
    fn eval<'py>(
        &self,
        py: Python<'py>,
        method: &str,
        seed: Option<u64>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let method = parse_method(method)?;
        let (eval, _) = self.pipeline.eval_run(method, seed).map_err(to_py)?;
        let d = PyDict::new(py);
        d.set_item("method", eval.method)?;
        d.set_item("seed", eval.seed)?;
        d.set_item("val_ppl", eval.report.val_ppl)?;
        d.set_item("tokens_scored", eval.report.tokens_scored)?;
        Ok(d)
    }

    #[pyo3(signature = (
        method,
        topic = 0,
        seed = None,
        concept = None,
        multipliers = vec![0.0, 1.0, 2.0, 5.0, 10.0],
        n_tokens = 256,
        gen_seeds = vec![1, 2, 3, 4, 5],
        after_topk = false,
        teacher_side = false
    ))]
    #[allow(clippy::too_many_arguments)]
    fn steer<'py>(
        &self,
        py: Python<'py>,
        method: &str,
        topic: usize,
        seed: Option<u64>,
        concept: Option<usize>,
        multipliers: Vec<f64>,
        n_tokens: usize,
        gen_seeds: Vec<u64>,
        after_topk: bool,
        teacher_side: bool,
    ) -> PyResult<Bound<'py, PyDict>> {
        let method = parse_method(method)?;
        let args = SteerArgs {
            topic,
            concept,
            multipliers,
            n_tokens,
            gen_seeds,
            after_topk,
            teacher_side,
        };
        report_to_dict(py, &self.pipeline.steer_run(method, seed, &args).map_err(to_py)?)
    }

    #[pyo3(signature = (method, seed = None, tau = 1e-2))]
    fn analyze_compression<'py>(
        &self,
        py: Python<'py>,
        method: &str,
        seed: Option<u64>,
        tau: f64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let method = parse_method(method)?;
        let (norms, _) = self.pipeline.analyze_compression(method, seed, tau).map_err(to_py)?;
        let d = PyDict::new(py);
        d.set_item("tau", norms.tau)?;
        d.set_item("fraction_below", norms.fraction_below)?;
        d.set_item("frobenius_sq", norms.frobenius_sq)?;
        d.set_item("norms", norms.norms)?;
        Ok(d)
    }

    fn compare<'py>(
        &self,
        py: Python<'py>,
        run_a: &str,
        run_b: &str,
        target_ppl: f64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let (cmp, _) = self.pipeline.compare(run_a, run_b, target_ppl).map_err(to_py)?;
        let d = PyDict::new(py);
        d.set_item("run_a", cmp.run_a)?;
        d.set_item("run_b", cmp.run_b)?;
        d.set_item("target_ppl", cmp.target_ppl)?;
        d.set_item("tokens_a", cmp.tokens_a)?;
        d.set_item("tokens_b", cmp.tokens_b)?;
        d.set_item("ratio", cmp.ratio)?;
        Ok(d)
    }
}

fn toml_from_str(text: &str) -> Result<ExperimentConfig, String> {
    // Flatten toml's multi-line caret diagrams into one line.
    toml::from_str(text).map_err(|e| e.to_string().split_whitespace().collect::<Vec<_>>().join(" "))
}

/// Re-runs a stage from its manifest; outputs are reproduced byte for byte.
#[pyfunction]
fn rerun_from_manifest(py: Python<'_>, manifest: PathBuf) -> PyResult<Bound<'_, PyDict>> {
    let report = cocomix_core::pipeline::rerun_from_manifest(&manifest).map_err(to_py)?;
    report_to_dict(py, &report)
}

/// Training methods the pipeline accepts.
#[pyfunction]
fn methods() -> Vec<&'static str> {
    Method::ALL.iter().map(|m| m.as_str()).collect()
}

#[pymodule]
fn cocomix_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyExperiment>()?;
    m.add_function(wrap_pyfunction!(rerun_from_manifest, m)?)?;
    m.add_function(wrap_pyfunction!(methods, m)?)?;
    Ok(())
}
