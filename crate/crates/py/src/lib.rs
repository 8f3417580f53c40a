//! Python bindings. Fields and coefficient sets cross the boundary as nested
//! lists of rows (`list[list[float]]`), which numpy accepts and produces via
//! `np.asarray(...)` and `.tolist()`.

use std::path::PathBuf;
use std::sync::Arc;

use nalgebra::DMatrix;
use pyo3::create_exception;
use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use hrtf_sphconv::cli::{self, Method};
use hrtf_sphconv::config::RunConfig;
use hrtf_sphconv::data::{self, Ear, HrtfField};
use hrtf_sphconv::network::{self, ModelParams, Network};
use hrtf_sphconv::sh::{self, ShCoefficients, ShtConfig, ShtOperator, SphericalGrid};
use hrtf_sphconv::{checkpoint, eval, sphconv, Error};

create_exception!(
    hrtf_sphconv,
    HrtfError,
    PyValueError,
    "Raised for invalid inputs, data and configuration."
);

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        other => HrtfError::new_err(format!("[{}] {other}", other.kind())),
    }
}

fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>, Error> {
    let cols = rows.first().map_or(0, Vec::len);
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != cols) {
        return Err(Error::DimensionMismatch {
            context: "row length",
            expected: cols.to_string(),
            got: format!("{} in row {i}", r.len()),
        });
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn parse_ear(s: &str) -> PyResult<Ear> {
    match s {
        "left" => Ok(Ear::Left),
        "right" => Ok(Ear::Right),
        _ => Err(HrtfError::new_err(format!(
            "ear must be 'left' or 'right', got {s:?}"
        ))),
    }
}

/// A set of directions on the sphere, as (theta, phi) pairs with theta the
/// elevation in [-pi/2, pi/2] and phi the azimuth in [0, 2pi).
#[pyclass(name = "Grid", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyGrid {
    inner: Arc<SphericalGrid>,
}

#[pymethods]
impl PyGrid {
    #[new]
    fn new(angles: Vec<(f64, f64)>) -> PyResult<Self> {
        let g = SphericalGrid::from_angles(&angles).map_err(to_py)?;
        Ok(Self { inner: Arc::new(g) })
    }

    #[staticmethod]
    fn fibonacci(points: usize) -> PyResult<Self> {
        let g = data::fibonacci_grid(points).map_err(to_py)?;
        Ok(Self { inner: Arc::new(g) })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let g = data::load_grid(&path).map_err(to_py)?;
        Ok(Self { inner: Arc::new(g) })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        data::save_grid(&self.inner, &path).map_err(to_py)
    }

    fn angles(&self) -> Vec<(f64, f64)> {
        self.inner
            .directions()
            .iter()
            .map(|d| (d.theta(), d.phi()))
            .collect()
    }

    /// SHA-256 of the direction list, hex encoded.
    fn hash(&self) -> String {
        self.inner.hash().to_hex()
    }

    fn subset(&self, indices: Vec<usize>) -> PyResult<Self> {
        let g = self.inner.subset(&indices).map_err(to_py)?;
        Ok(Self { inner: Arc::new(g) })
    }

    /// Conditioning of the order-`order` SH matrix on this grid.
    fn condition_number(&self, order: usize) -> f64 {
        sh::condition_number(&sh::build_sh_matrix(&self.inner, order))
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Grid(points={}, hash={})",
            self.inner.len(),
            &self.hash()[..16]
        )
    }
}

/// Real orthonormal spherical harmonic of order `n`, mode `m`.
#[pyfunction]
fn real_sh(n: usize, m: i64, theta: f64, phi: f64) -> PyResult<f64> {
    let d = sh::Direction::new(theta, phi).map_err(to_py)?;
    sh::real_sh(n, m, &d).map_err(to_py)
}

/// The SH matrix, one row per grid direction and one column per coefficient.
#[pyfunction]
fn sh_matrix(grid: &PyGrid, order: usize) -> Vec<Vec<f64>> {
    rows_of(sh::build_sh_matrix(&grid.inner, order).values())
}

/// Least-squares SH transform of `values` (points x channels).
#[pyfunction]
#[pyo3(signature = (values, grid, order, ridge = 0.0))]
fn sht(values: Vec<Vec<f64>>, grid: &PyGrid, order: usize, ridge: f64) -> PyResult<Vec<Vec<f64>>> {
    let h = matrix_from_rows(&values).map_err(to_py)?;
    let y = sh::build_sh_matrix(&grid.inner, order);
    let cfg = ShtConfig {
        ridge,
        ..ShtConfig::default()
    };
    let a = ShtOperator::new(&y, &cfg)
        .and_then(|op| op.apply(&h))
        .map_err(to_py)?;
    Ok(rows_of(a.values()))
}

/// Evaluates coefficients (coefficients x channels) on `grid`.
#[pyfunction]
fn isht(coeffs: Vec<Vec<f64>>, grid: &PyGrid, order: usize) -> PyResult<Vec<Vec<f64>>> {
    let a = matrix_from_rows(&coeffs)
        .and_then(|m| ShCoefficients::new(m, order))
        .map_err(to_py)?;
    let h = sh::isht(&a, &sh::build_sh_matrix(&grid.inner, order)).map_err(to_py)?;
    Ok(rows_of(&h))
}

/// Convolves every channel with the zonal kernel `beta` (one weight per order).
#[pyfunction]
fn spectral_convolve(coeffs: Vec<Vec<f64>>, beta: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
    let order = beta
        .len()
        .checked_sub(1)
        .ok_or_else(|| HrtfError::new_err("beta must not be empty"))?;
    let a = matrix_from_rows(&coeffs)
        .and_then(|m| ShCoefficients::new(m, order))
        .and_then(|a| sphconv::spectral_convolve(&a, &beta))
        .map_err(to_py)?;
    Ok(rows_of(a.values()))
}

/// Rotates a field about the vertical axis by `angle` radians.
#[pyfunction]
fn rotate_z(
    values: Vec<Vec<f64>>,
    grid: &PyGrid,
    angle: f64,
    order: usize,
) -> PyResult<Vec<Vec<f64>>> {
    let h = matrix_from_rows(&values).map_err(to_py)?;
    let out = sphconv::rotate_z(&h, &grid.inner, angle, order).map_err(to_py)?;
    Ok(rows_of(&out))
}

/// SH interpolation baseline: fit order `order` on the known directions and
/// evaluate on the dense grid.
#[pyfunction]
fn sh_baseline(
    known_values: Vec<Vec<f64>>,
    known_grid: &PyGrid,
    order: usize,
    dense_grid: &PyGrid,
) -> PyResult<Vec<Vec<f64>>> {
    let h = matrix_from_rows(&known_values).map_err(to_py)?;
    let out = eval::sh_baseline(&h, &known_grid.inner, order, &dense_grid.inner).map_err(to_py)?;
    Ok(rows_of(&out))
}

/// Log-spectral distance in dB between two fields of equal shape.
#[pyfunction]
fn lsd(truth: Vec<Vec<f64>>, predicted: Vec<Vec<f64>>) -> PyResult<f64> {
    let (t, p) = (
        matrix_from_rows(&truth).map_err(to_py)?,
        matrix_from_rows(&predicted).map_err(to_py)?,
    );
    network::lsd(&t, &p).map_err(to_py)
}

/// LSD restricted to the rows listed in `unknown`.
#[pyfunction]
fn lsd_unknown(
    predicted: Vec<Vec<f64>>,
    truth: Vec<Vec<f64>>,
    unknown: Vec<usize>,
) -> PyResult<f64> {
    let (p, t) = (
        matrix_from_rows(&predicted).map_err(to_py)?,
        matrix_from_rows(&truth).map_err(to_py)?,
    );
    eval::eval_unknown(&p, &t, &unknown).map_err(to_py)
}

/// Run configuration, parsed from TOML. Every field has a default.
#[pyclass(name = "Config", skip_from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (toml = ""))]
    fn new(toml: &str) -> PyResult<Self> {
        let inner = RunConfig::from_toml(toml, "<python>").map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: RunConfig::load(&path).map_err(to_py)?,
        })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    #[getter]
    fn threads(&self) -> usize {
        self.inner.threads
    }

    #[setter]
    fn set_threads(&mut self, threads: usize) {
        self.inner.threads = threads;
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(seed={}, subjects={}, bins={})",
            self.inner.seed, self.inner.dataset.subjects, self.inner.dataset.bins
        )
    }
}

/// A trained (or initial) model loaded from a checkpoint.
#[pyclass(name = "Model", frozen)]
struct PyModel {
    params: ModelParams,
    network: Network,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let params = checkpoint::load(&path).map_err(to_py)?;
        let network = Network::new(&params, &ShtConfig::default()).map_err(to_py)?;
        Ok(Self { params, network })
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.params.num_params()
    }

    #[getter]
    fn channels(&self) -> usize {
        self.params.channels
    }

    #[getter]
    fn sparse_grid(&self) -> PyGrid {
        PyGrid {
            inner: self.params.sparse_grid.clone(),
        }
    }

    #[getter]
    fn dense_grid(&self) -> PyGrid {
        PyGrid {
            inner: self.params.dense_grid.clone(),
        }
    }

    /// Maps a sparse field (sparse points x channels) to the dense grid.
    fn forward(&self, py: Python<'_>, sparse: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let h = matrix_from_rows(&sparse).map_err(to_py)?;
        let out = py
            .detach(|| self.network.forward(&self.params, &h))
            .map_err(to_py)?;
        Ok(rows_of(&out))
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(params={}, channels={}, sparse={}, dense={})",
            self.params.num_params(),
            self.params.channels,
            self.params.sparse_grid.len(),
            self.params.dense_grid.len()
        )
    }
}

/// Reads a field file and returns a dict with `values`, `grid`,
/// `frequencies`, `subject` and `ear`.
#[pyfunction]
fn load_field<'py>(py: Python<'py>, path: PathBuf) -> PyResult<Bound<'py, PyDict>> {
    let f = data::load_field(&path).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("values", rows_of(&f.values))?;
    d.set_item(
        "grid",
        PyGrid {
            inner: f.grid.clone(),
        },
    )?;
    d.set_item("frequencies", f.freqs.values().to_vec())?;
    d.set_item("subject", f.subject_id)?;
    d.set_item("ear", f.ear.as_str())?;
    Ok(d)
}

#[pyfunction]
#[pyo3(signature = (path, values, grid, frequencies, subject = 0, ear = "left"))]
fn save_field(
    path: PathBuf,
    values: Vec<Vec<f64>>,
    grid: &PyGrid,
    frequencies: Vec<f64>,
    subject: u32,
    ear: &str,
) -> PyResult<()> {
    let ear = parse_ear(ear)?;
    let field = matrix_from_rows(&values)
        .and_then(|v| {
            let freqs = data::FrequencyAxis::new(frequencies)?;
            HrtfField::new(v, grid.inner.clone(), freqs, subject, ear)
        })
        .map_err(to_py)?;
    data::save_field(&field, &path).map_err(to_py)
}

fn parse_json<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

/// Generates a synthetic dataset into `out` and returns the split as a dict.
#[pyfunction]
fn generate<'py>(py: Python<'py>, config: &PyConfig, out: PathBuf) -> PyResult<Bound<'py, PyDict>> {
    let cfg = config.inner.clone();
    let m = py
        .detach(move || cli::generate(&cfg, &out))
        .map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("train", m.split.train)?;
    d.set_item("validation", m.split.validation)?;
    d.set_item("test", m.split.test)?;
    d.set_item("dense_hash", m.dense_hash)?;
    d.set_item("known_hash", m.known_hash)?;
    Ok(d)
}

/// Trains on a generated dataset; writes the checkpoint and history into `out`.
#[pyfunction]
fn train<'py>(
    py: Python<'py>,
    config: &PyConfig,
    dataset: PathBuf,
    out: PathBuf,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = config.inner.clone();
    let s = py
        .detach(move || cli::train(&cfg, &dataset, &out))
        .map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("parameters", s.parameters)?;
    d.set_item("epochs_run", s.epochs_run)?;
    d.set_item("best_epoch", s.best_epoch)?;
    d.set_item("best_val_lsd", s.best_val_lsd)?;
    d.set_item("steps", s.steps)?;
    Ok(d)
}

/// Scores one method on the test subjects and returns the summary as a dict.
/// `method` is `"checkpoint"`, `"zero-kernel"` (both need `checkpoint`),
/// `"baseline"` (uses `order`, default from the config) or `"ground-truth"`.
#[pyfunction]
#[pyo3(signature = (config, dataset, method, out, checkpoint = None, order = None))]
fn evaluate<'py>(
    py: Python<'py>,
    config: &PyConfig,
    dataset: PathBuf,
    method: &str,
    out: PathBuf,
    checkpoint: Option<PathBuf>,
    order: Option<usize>,
) -> PyResult<Bound<'py, PyAny>> {
    let need_ckpt = || {
        checkpoint
            .clone()
            .ok_or_else(|| HrtfError::new_err(format!("method {method:?} needs checkpoint=")))
    };
    let method = match method {
        "checkpoint" => Method::Checkpoint(need_ckpt()?),
        "zero-kernel" => Method::ZeroKernel(need_ckpt()?),
        "baseline" => Method::Baseline(order.unwrap_or(config.inner.eval.baseline_order)),
        "ground-truth" => Method::GroundTruth,
        other => return Err(HrtfError::new_err(format!("unknown method {other:?}"))),
    };
    let cfg = config.inner.clone();
    let report = py
        .detach(move || cli::evaluate(&cfg, &dataset, &method, &out))
        .map_err(to_py)?;
    parse_json(py, &report.summary_json())
}

#[pymodule]
#[pyo3(name = "hrtf_sphconv")]
fn hrtf_sphconv_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("HrtfError", m.py().get_type::<HrtfError>())?;
    m.add_class::<PyGrid>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(real_sh, m)?)?;
    m.add_function(wrap_pyfunction!(sh_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(sht, m)?)?;
    m.add_function(wrap_pyfunction!(isht, m)?)?;
    m.add_function(wrap_pyfunction!(spectral_convolve, m)?)?;
    m.add_function(wrap_pyfunction!(rotate_z, m)?)?;
    m.add_function(wrap_pyfunction!(sh_baseline, m)?)?;
    m.add_function(wrap_pyfunction!(lsd, m)?)?;
    m.add_function(wrap_pyfunction!(lsd_unknown, m)?)?;
    m.add_function(wrap_pyfunction!(load_field, m)?)?;
    m.add_function(wrap_pyfunction!(save_field, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
