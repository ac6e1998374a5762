//! Python bindings: schedules, toy data, metrics, training, sampling and the
//! discrepancy probe. Images cross the boundary as lists of rows.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use dream_core::data::{downsample, generate_pair as core_pair, Family, ToyDataConfig, UpsampleMode};
use dream_core::diagnostics::{self, discrepancy_probe};
use dream_core::diffusion::{self, ddpm_sample, retained_steps as core_retained};
use dream_core::experiment::commands::eval_pairs;
use dream_core::experiment::{run_gradcheck, run_training, Checkpoint, TrainConfig};
use dream_core::rng::{stream_id, stream_rng};
use dream_core::schedule::{LambdaPolicy, NoiseSchedule, SigmaMode};
use dream_core::tensor::Tensor;
use dream_core::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Numerical(_) => PyArithmeticError::new_err(e.to_string()),
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn image(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if h == 0 || w == 0 || rows.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("image must be a non-empty rectangular list of rows"));
    }
    Tensor::from_vec(&[h, w], rows.into_iter().flatten().collect()).map_err(py_err)
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let w = *t.shape().last().unwrap_or(&1);
    t.data().chunks(w).map(<[f64]>::to_vec).collect()
}

fn flat_row(t: &Tensor) -> Tensor {
    Tensor::from_vec(&[1, t.len()], t.data().to_vec()).expect("non-empty image")
}

/// Linear β schedule with its cumulative products and reverse-step variances.
#[pyclass(name = "NoiseSchedule", frozen)]
struct PySchedule {
    inner: NoiseSchedule,
}

#[pymethods]
impl PySchedule {
    #[new]
    #[pyo3(signature = (beta_start, beta_end, steps, sigma_mode = "beta"))]
    fn new(beta_start: f64, beta_end: f64, steps: usize, sigma_mode: &str) -> PyResult<Self> {
        let mode = SigmaMode::parse(sigma_mode).ok_or_else(|| PyValueError::new_err(format!("unknown sigma mode {sigma_mode:?}")))?;
        Ok(Self {
            inner: NoiseSchedule::linear(beta_start, beta_end, steps, mode).map_err(py_err)?,
        })
    }

    #[getter]
    fn steps(&self) -> usize {
        self.inner.steps()
    }

    fn beta(&self, t: usize) -> PyResult<f64> {
        self.inner.beta(t).map_err(py_err)
    }

    fn alpha(&self, t: usize) -> PyResult<f64> {
        self.inner.alpha(t).map_err(py_err)
    }

    fn alpha_bar(&self, t: usize) -> PyResult<f64> {
        self.inner.alpha_bar(t).map_err(py_err)
    }

    fn sigma(&self, t: usize) -> PyResult<f64> {
        self.inner.sigma(t).map_err(py_err)
    }

    /// λ_t = (√(1 − ᾱ_t))^p; `p` may be `float("inf")`.
    fn weight(&self, t: usize, p: f64) -> PyResult<f64> {
        self.inner.lambda(t, LambdaPolicy::new(p).map_err(py_err)?).map_err(py_err)
    }

    fn alpha_bars(&self) -> Vec<f64> {
        self.inner.alpha_bars().to_vec()
    }

    /// y_t = √ᾱ_t y₀ + √(1 − ᾱ_t) ε.
    fn forward_diffuse(&self, y0: Vec<Vec<f64>>, t: usize, eps: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let out = diffusion::forward_diffuse(&self.inner, &image(y0)?, t, &image(eps)?).map_err(py_err)?;
        Ok(rows(&out))
    }
}

/// Step indices visited by a strided chain, ascending.
#[pyfunction]
fn retained_steps(total: usize, stride: usize) -> PyResult<Vec<usize>> {
    core_retained(total, stride).map_err(py_err)
}

/// Pair `index` of a toy dataset as `(x0, y0)`: the upsampled LR condition
/// and the HR target.
#[pyfunction]
#[pyo3(signature = (index, image_extent = 8, scale = 4, family = "gaussian_blobs", seed = 0, upsample = "bilinear"))]
fn generate_pair(
    index: usize,
    image_extent: usize,
    scale: usize,
    family: &str,
    seed: u64,
    upsample: &str,
) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let config = ToyDataConfig {
        image_extent,
        scale,
        family: Family::parse(family).ok_or_else(|| PyValueError::new_err(format!("unknown family {family:?}")))?,
        seed,
        upsample: UpsampleMode::parse(upsample).ok_or_else(|| PyValueError::new_err(format!("unknown upsample {upsample:?}")))?,
        ..ToyDataConfig::default()
    };
    let pair = core_pair(&config, index).map_err(py_err)?;
    Ok((rows(&pair.x0), rows(&pair.y0)))
}

/// Box-filter downsampling by an integer factor.
#[pyfunction]
fn box_downsample(y: Vec<Vec<f64>>, scale: usize) -> PyResult<Vec<Vec<f64>>> {
    Ok(rows(&downsample(&image(y)?, scale).map_err(py_err)?))
}

#[pyfunction]
fn mse(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<f64> {
    diagnostics::mse(&image(a)?, &image(b)?).map_err(py_err)
}

/// PSNR in dB for images in [-1, 1]; infinite for identical images.
#[pyfunction]
#[pyo3(signature = (sr, hr, peak = diagnostics::PEAK))]
fn psnr(sr: Vec<Vec<f64>>, hr: Vec<Vec<f64>>, peak: f64) -> PyResult<f64> {
    diagnostics::psnr(&image(sr)?, &image(hr)?, peak).map_err(py_err)
}

#[pyfunction]
fn ssim(sr: Vec<Vec<f64>>, hr: Vec<Vec<f64>>) -> PyResult<f64> {
    diagnostics::ssim(&image(sr)?, &image(hr)?).map_err(py_err)
}

/// Scaled MSE between the downsampled SR image and the LR observation.
#[pyfunction]
fn consistency(sr: Vec<Vec<f64>>, lr: Vec<Vec<f64>>, scale: usize) -> PyResult<f64> {
    diagnostics::consistency(&image(sr)?, &image(lr)?, scale).map_err(py_err)
}

/// A parsed experiment config.
#[pyclass(name = "TrainConfig", frozen)]
struct PyConfig {
    inner: TrainConfig,
}

#[pymethods]
impl PyConfig {
    /// Parses `section.key = value` lines; unspecified keys take defaults.
    #[new]
    #[pyo3(signature = (text = ""))]
    fn new(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: TrainConfig::parse(text).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: TrainConfig::load(&path).map_err(py_err)?,
        })
    }

    /// Every key with its value, in a form `TrainConfig(...)` re-parses.
    fn echo(&self) -> String {
        self.inner.echo()
    }

    /// A copy with `key` set to `value`.
    fn with_value(&self, key: &str, value: &str) -> PyResult<Self> {
        let mut text: String = self
            .inner
            .echo()
            .lines()
            .filter(|l| l.split('=').next().map(str::trim) != Some(key))
            .map(|l| format!("{l}\n"))
            .collect();
        text.push_str(&format!("{key} = {value}\n"));
        Self::new(&text)
    }

    #[getter]
    fn mode(&self) -> &'static str {
        self.inner.mode.name()
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.inner.iterations
    }

    #[getter]
    fn output_dir(&self) -> PathBuf {
        self.inner.output_dir.clone()
    }

    fn __repr__(&self) -> String {
        format!("TrainConfig(mode={:?}, iterations={})", self.inner.mode.name(), self.inner.iterations)
    }
}

/// A training state: config, weights, optimizer and generator.
#[pyclass(name = "Checkpoint", frozen)]
struct PyCheckpoint {
    inner: Checkpoint,
}

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Checkpoint::load(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    #[getter]
    fn iteration(&self) -> u64 {
        self.inner.iteration
    }

    #[getter]
    fn config(&self) -> PyConfig {
        PyConfig {
            inner: self.inner.config.clone(),
        }
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.params.parameter_count()
    }

    /// Eval-mode ε_θ(x₀, y_t, t) for one image.
    fn predict_noise(&self, x0: Vec<Vec<f64>>, y_t: Vec<Vec<f64>>, t: usize) -> PyResult<Vec<Vec<f64>>> {
        let (x0, y_t) = (image(x0)?, image(y_t)?);
        let shape = y_t.shape().to_vec();
        let out = self.inner.params.predict_batch(&flat_row(&x0), &flat_row(&y_t), &[t]).map_err(py_err)?;
        Ok(rows(&Tensor::from_vec(&shape, out.into_data()).map_err(py_err)?))
    }

    /// Ancestral sample for one condition using stream `(stream, 0)` of `seed`.
    #[pyo3(signature = (x0, stride = 1, seed = 0, stream = 0))]
    fn sample(&self, py: Python<'_>, x0: Vec<Vec<f64>>, stride: usize, seed: u64, stream: u64) -> PyResult<Vec<Vec<f64>>> {
        let x0 = image(x0)?;
        let schedule = self.inner.config.schedule().map_err(py_err)?;
        let params = self.inner.params.frozen_copy();
        let out = py
            .detach(|| {
                let mut rng = stream_rng(seed, stream_id(stream, 0));
                ddpm_sample(&params, &schedule, &x0, &mut rng, stride, false)
            })
            .map_err(py_err)?;
        Ok(rows(&out.y0_hat))
    }

    /// Training-versus-sampling error on the first `n` evaluation pairs.
    #[pyo3(signature = (t_grid, n, seed = 0))]
    fn probe<'py>(&self, py: Python<'py>, t_grid: Vec<usize>, n: usize, seed: u64) -> PyResult<Bound<'py, PyDict>> {
        let schedule = self.inner.config.schedule().map_err(py_err)?;
        let pairs = eval_pairs(&self.inner.config, n).map_err(py_err)?;
        let params = self.inner.params.frozen_copy();
        let curve = py
            .detach(|| discrepancy_probe(&params, &schedule, &pairs, &t_grid, n, seed))
            .map_err(py_err)?;
        let d = PyDict::new(py);
        d.set_item("t", curve.t_grid)?;
        d.set_item("train_mse_mean", curve.train_mean)?;
        d.set_item("train_mse_std", curve.train_std)?;
        d.set_item("sample_mse_mean", curve.sample_mean)?;
        d.set_item("sample_mse_std", curve.sample_std)?;
        Ok(d)
    }

    fn __repr__(&self) -> String {
        format!(
            "Checkpoint(mode={:?}, iteration={})",
            self.inner.config.mode.name(),
            self.inner.iteration
        )
    }
}

/// Trains `config` (optionally continuing `resume`), writing its outputs to
/// `config.output_dir`.
#[pyfunction]
#[pyo3(signature = (config, resume = None, verbose = false))]
fn train(py: Python<'_>, config: &PyConfig, resume: Option<&PyCheckpoint>, verbose: bool) -> PyResult<PyCheckpoint> {
    let cfg = config.inner.clone();
    let resume = resume.map(|c| c.inner.clone());
    let inner = py.detach(|| run_training(&cfg, resume, verbose)).map_err(py_err)?;
    Ok(PyCheckpoint { inner })
}

/// Runs the finite-difference suite; returns `(passed, report)`.
#[pyfunction]
#[pyo3(signature = (seed = 0))]
fn gradcheck(py: Python<'_>, seed: u64) -> PyResult<(bool, String)> {
    let report = py.detach(|| run_gradcheck(seed, None)).map_err(py_err)?;
    Ok((report.passed(), report.to_string()))
}

#[pymodule]
fn dream_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySchedule>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_function(wrap_pyfunction!(retained_steps, m)?)?;
    m.add_function(wrap_pyfunction!(generate_pair, m)?)?;
    m.add_function(wrap_pyfunction!(box_downsample, m)?)?;
    m.add_function(wrap_pyfunction!(mse, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(consistency, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
