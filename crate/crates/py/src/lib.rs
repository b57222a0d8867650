//! Python bindings: speckle ensembles, the forward model, metrics, and the
//! end-to-end pipeline.

use std::path::PathBuf;

use bendlens::cli::{ExperimentConfig, Pipeline};
use bendlens::fiber::{self, IlluminationMode, SpeckleEnsemble, DEFAULT_DECORRELATION_SCALE};
use bendlens::{eval, Error};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        Error::NonFiniteGradient(_)
        | Error::NonFiniteLoss { .. }
        | Error::Diverged { .. }
        | Error::NonScalarLoss(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn parse_mode(mode: &str) -> PyResult<IlluminationMode> {
    match mode {
        "wavefront_shaped" => Ok(IlluminationMode::WavefrontShaped),
        "random" => Ok(IlluminationMode::Random),
        other => Err(PyValueError::new_err(format!(
            "mode must be 'wavefront_shaped' or 'random', got {other:?}"
        ))),
    }
}

/// Transmission matrices for the default eleven fiber configurations.
#[pyclass(name = "Ensemble", module = "bendlens_py")]
struct PyEnsemble {
    inner: SpeckleEnsemble,
}

#[pymethods]
impl PyEnsemble {
    #[new]
    #[pyo3(signature = (patterns, pixels, mode = "wavefront_shaped", seed = 0, scale = DEFAULT_DECORRELATION_SCALE))]
    fn new(patterns: usize, pixels: usize, mode: &str, seed: u64, scale: f64) -> PyResult<Self> {
        let inner = SpeckleEnsemble::generate(patterns, pixels, fiber::default_grid(), parse_mode(mode)?, scale, seed)
            .map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: SpeckleEnsemble::load(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// Configuration ids in ensemble order.
    fn config_ids(&self) -> Vec<String> {
        self.inner.configurations.iter().map(|c| c.id.clone()).collect()
    }

    /// Row-major matrix for configuration `id`, as a list of rows.
    fn matrix(&self, id: &str) -> PyResult<Vec<Vec<f64>>> {
        let m = self.inner.matrix_by_id(id).map_err(to_py)?;
        Ok((0..m.rows).map(|i| m.row(i).to_vec()).collect())
    }

    fn correlation(&self, a: &str, b: &str) -> PyResult<f64> {
        let (a, b) = (
            self.inner.matrix_by_id(a).map_err(to_py)?,
            self.inner.matrix_by_id(b).map_err(to_py)?,
        );
        fiber::speckle_correlation(a, b).map_err(to_py)
    }

    /// Normalized measurement `y` (both channels) of image `x` through
    /// configuration `id`.
    #[pyo3(signature = (id, x, s = 10.0, noise_std = 0.0))]
    fn measure(&self, id: &str, x: Vec<f64>, s: f64, noise_std: f64) -> PyResult<Vec<f64>> {
        let a = self.inner.matrix_by_id(id).map_err(to_py)?;
        let raw = fiber::forward_measure(a, &x, noise_std).map_err(to_py)?;
        let bg = fiber::Backgrounds::simulate(a);
        let n = fiber::apply_normalization(&raw.ax, s, &bg.white, &bg.black).map_err(to_py)?;
        Ok(n.y)
    }
}

/// Peak signal-to-noise ratio in dB.
#[pyfunction]
#[pyo3(signature = (x, x_hat, peak = 1.0))]
fn psnr(x: Vec<f64>, x_hat: Vec<f64>, peak: f64) -> PyResult<f64> {
    eval::psnr(&x, &x_hat, peak).map_err(to_py)
}

/// Runs every stage for the JSON config at `config` and returns the
/// evaluation report as JSON.
#[pyfunction]
#[pyo3(signature = (config, out, seed = None))]
fn run_demo(py: Python<'_>, config: PathBuf, out: PathBuf, seed: Option<u64>) -> PyResult<String> {
    let mut cfg = ExperimentConfig::load(&config).map_err(to_py)?;
    if let Some(seed) = seed {
        cfg = cfg.with_seed(seed);
    }
    let summary = py.allow_threads(|| Pipeline::new(cfg, out).run_demo()).map_err(to_py)?;
    summary.report.to_json().map_err(to_py)
}

#[pymodule]
fn bendlens_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyEnsemble>()?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(run_demo, m)?)?;
    Ok(())
}
