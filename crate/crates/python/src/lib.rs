//! Python bindings. Vectors cross the boundary as lists of floats (numpy
//! arrays are accepted wherever a sequence is), matrices as lists of rows.

use std::path::PathBuf;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use trr::sensing::{self, DatasetSplits, MeasurementMatrix, Split};
use trr::solvers::{self, Init, SolveOptions, SolverReport, StepRule, TrrProblem};
use trr::utrr::{self, UtrrParams};
use trr::{formats, metrics, ExperimentConfig};

fn py_err(e: trr::Error) -> PyErr {
    match e {
        trr::Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for trr::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn to_matrix(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(PyValueError::new_err("matrix rows must have equal length"));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

fn from_matrix(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Measurement vectors and labels of one split.
type PairLists = (Vec<Vec<f64>>, Vec<Vec<f64>>);

fn vec_of(v: &DVector<f64>) -> Vec<f64> {
    v.as_slice().to_vec()
}

/// Experiment configuration in the `key = value` text format.
#[pyclass(name = "Config", module = "pytrr")]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    fn new() -> Self {
        PyConfig {
            inner: ExperimentConfig::default(),
        }
    }

    #[staticmethod]
    fn preset(name: &str) -> PyResult<Self> {
        ExperimentConfig::preset(name).py().map(|inner| PyConfig { inner })
    }

    #[staticmethod]
    fn preset_names() -> Vec<&'static str> {
        ExperimentConfig::preset_names().collect()
    }

    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        ExperimentConfig::parse(text).py().map(|inner| PyConfig { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        ExperimentConfig::load(&path).py().map(|inner| PyConfig { inner })
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().py()
    }

    #[getter]
    fn n_antennas(&self) -> usize {
        self.inner.n_antennas
    }

    #[getter]
    fn n_measurements(&self) -> usize {
        self.inner.n_measurements
    }

    #[getter]
    fn n_users(&self) -> usize {
        self.inner.n_users
    }

    #[getter]
    fn rho(&self) -> f64 {
        self.inner.rho
    }

    #[getter]
    fn top_k(&self) -> usize {
        self.inner.top_k
    }

    #[getter]
    fn layers(&self) -> usize {
        self.inner.layers
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(N={}, M={}, seed={})",
            self.inner.n_antennas, self.inner.n_measurements, self.inner.seed
        )
    }
}

/// Train/validation/test splits of real-valued `(y, x)` pairs.
#[pyclass(name = "Dataset", module = "pytrr")]
struct PyDataset {
    inner: DatasetSplits,
}

fn parse_split(name: &str) -> PyResult<Split> {
    Split::ALL
        .into_iter()
        .find(|s| s.tag() == name)
        .ok_or_else(|| PyValueError::new_err(format!("unknown split {name:?} (expected train, val or test)")))
}

#[pymethods]
impl PyDataset {
    /// Sensing matrix `Phi` (M rows of N entries).
    #[getter]
    fn phi(&self) -> Vec<Vec<f64>> {
        from_matrix(self.inner.train.phi.matrix())
    }

    /// Number of real-valued pairs in a split.
    fn pair_count(&self, split: &str) -> PyResult<usize> {
        Ok(self.inner.get(parse_split(split)?).len())
    }

    /// `(measurements, labels)` of a split.
    fn pairs(&self, split: &str) -> PyResult<PairLists> {
        let ds = self.inner.get(parse_split(split)?);
        Ok(ds
            .pairs
            .iter()
            .map(|p| (vec_of(&p.measurement), vec_of(&p.label)))
            .unzip())
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        formats::write_dataset(&path, &self.inner).py()
    }
}

#[pyfunction]
fn generate_dataset(config: &PyConfig) -> PyResult<PyDataset> {
    sensing::build_dataset(&config.inner)
        .py()
        .map(|inner| PyDataset { inner })
}

#[pyfunction]
fn load_dataset(path: PathBuf, config: &PyConfig) -> PyResult<PyDataset> {
    formats::read_dataset(&path, config.inner.snr)
        .py()
        .map(|inner| PyDataset { inner })
}

/// Outcome of an iterative solve.
#[pyclass(name = "SolveResult", module = "pytrr", get_all)]
struct PySolveResult {
    solution: Vec<f64>,
    iterations: usize,
    objective_trace: Vec<f64>,
    error_trace: Option<Vec<f64>>,
    converged: bool,
}

impl From<SolverReport> for PySolveResult {
    fn from(r: SolverReport) -> Self {
        PySolveResult {
            solution: vec_of(&r.solution),
            iterations: r.iterations_run,
            objective_trace: r.objective_trace,
            error_trace: r.error_trace,
            converged: r.converged,
        }
    }
}

fn options(eps: f64, max_iter: usize, zero_init: bool, reference: Option<Vec<f64>>) -> SolveOptions {
    let init = if zero_init { Init::Zero } else { Init::Backprojection };
    let opts = SolveOptions::new(eps, max_iter).with_init(init);
    match reference {
        Some(x) => opts.with_reference(DVector::from_vec(x)),
        None => opts,
    }
}

fn problem(phi: Vec<Vec<f64>>, y: Vec<f64>, rho: f64, top_k: usize) -> PyResult<TrrProblem> {
    TrrProblem::from_phi(&to_matrix(&phi)?, DVector::from_vec(y), rho, top_k).py()
}

#[pyfunction]
#[pyo3(signature = (phi, y, rho, top_k, eps = 1e-6, max_iter = 600, zero_init = false, reference = None))]
#[allow(clippy::too_many_arguments)]
fn itrr(
    phi: Vec<Vec<f64>>,
    y: Vec<f64>,
    rho: f64,
    top_k: usize,
    eps: f64,
    max_iter: usize,
    zero_init: bool,
    reference: Option<Vec<f64>>,
) -> PyResult<PySolveResult> {
    let p = problem(phi, y, rho, top_k)?;
    solvers::itrr(&p, &options(eps, max_iter, zero_init, reference))
        .py()
        .map(Into::into)
}

/// Accelerated variant with Barzilai-Borwein steps.
#[pyfunction]
#[pyo3(signature = (phi, y, rho, top_k, eps = 1e-6, max_iter = 600, zero_init = false, reference = None))]
#[allow(clippy::too_many_arguments)]
fn itrr_bb(
    phi: Vec<Vec<f64>>,
    y: Vec<f64>,
    rho: f64,
    top_k: usize,
    eps: f64,
    max_iter: usize,
    zero_init: bool,
    reference: Option<Vec<f64>>,
) -> PyResult<PySolveResult> {
    let p = problem(phi, y, rho, top_k)?;
    solvers::itrr_bb(&p, &options(eps, max_iter, zero_init, reference))
        .py()
        .map(Into::into)
}

#[pyfunction]
#[pyo3(signature = (phi, y, lambda2, eps = 1e-6, max_iter = 600))]
fn ridge(phi: Vec<Vec<f64>>, y: Vec<f64>, lambda2: f64, eps: f64, max_iter: usize) -> PyResult<PySolveResult> {
    solvers::pgd_ridge(
        &to_matrix(&phi)?,
        &DVector::from_vec(y),
        lambda2,
        StepRule::Bb,
        &options(eps, max_iter, false, None),
    )
    .py()
    .map(Into::into)
}

#[pyfunction]
#[pyo3(signature = (phi, y, lambda1, eps = 1e-6, max_iter = 600))]
fn lasso(phi: Vec<Vec<f64>>, y: Vec<f64>, lambda1: f64, eps: f64, max_iter: usize) -> PyResult<PySolveResult> {
    solvers::pgd_lasso(
        &to_matrix(&phi)?,
        &DVector::from_vec(y),
        lambda1,
        &options(eps, max_iter, false, None),
    )
    .py()
    .map(Into::into)
}

#[pyfunction]
fn omp(phi: Vec<Vec<f64>>, y: Vec<f64>, sparsity: usize) -> PyResult<Vec<f64>> {
    solvers::omp(&to_matrix(&phi)?, &DVector::from_vec(y), sparsity)
        .py()
        .map(|x| vec_of(&x))
}

#[pyfunction]
fn objective(phi: Vec<Vec<f64>>, y: Vec<f64>, rho: f64, top_k: usize, z: Vec<f64>) -> PyResult<f64> {
    let p = problem(phi, y, rho, top_k)?;
    solvers::objective(&p, &DVector::from_vec(z)).py()
}

#[pyfunction]
fn gradient(phi: Vec<Vec<f64>>, y: Vec<f64>, rho: f64, top_k: usize, z: Vec<f64>) -> PyResult<Vec<f64>> {
    let p = problem(phi, y, rho, top_k)?;
    solvers::gradient(&p, &DVector::from_vec(z)).py().map(|g| vec_of(&g))
}

/// Sum of squares of the `k` largest-magnitude entries.
#[pyfunction]
fn top_k_sq_norm(x: Vec<f64>, k: usize) -> PyResult<f64> {
    solvers::top_k2_norm(&x, k).py()
}

#[pyfunction]
fn trim_top_k(z: Vec<f64>, k: usize) -> PyResult<Vec<f64>> {
    solvers::trim_top_k(&z, k).py()
}

#[pyfunction]
fn lift(x: Vec<f64>) -> Vec<f64> {
    vec_of(&solvers::lift(&DVector::from_vec(x)))
}

#[pyfunction]
fn unlift(z: Vec<f64>) -> Vec<f64> {
    vec_of(&solvers::unlift(&DVector::from_vec(z)))
}

/// NMSE in dB over a list of real or complex vectors.
#[pyfunction]
fn nmse_db(truth: Vec<Vec<Complex64>>, estimate: Vec<Vec<Complex64>>) -> PyResult<f64> {
    let t: Vec<_> = truth.into_iter().map(DVector::from_vec).collect();
    let e: Vec<_> = estimate.into_iter().map(DVector::from_vec).collect();
    metrics::nmse_db(&t, &e).py()
}

/// Downlink sum rate of a zero-forcing precoder built from `h_estimate`
/// and applied to `h_true`; each argument is a list of per-user channels.
#[pyfunction]
fn zf_sum_rate(h_true: Vec<Vec<Complex64>>, h_estimate: Vec<Vec<Complex64>>, snr_db: f64) -> PyResult<f64> {
    let users = |h: Vec<Vec<Complex64>>| {
        let cols: Vec<_> = h.into_iter().map(DVector::from_vec).collect();
        metrics::MultiUserChannel::from_users(&cols).py()
    };
    let truth = users(h_true)?;
    let precoder = metrics::zf_precoder(&users(h_estimate)?).py()?;
    metrics::sum_rate(&truth, &precoder, snr_db).py()
}

/// Unfolded trimmed-ridge network bound to a dataset's sensing matrix.
#[pyclass(name = "Model", module = "pytrr")]
struct PyModel {
    inner: UtrrParams,
}

#[pymethods]
impl PyModel {
    /// Fresh network with every layer initialized from `Phi`.
    #[staticmethod]
    #[pyo3(signature = (dataset, layers, top_k, rcc = true))]
    fn init(dataset: &PyDataset, layers: usize, top_k: usize, rcc: bool) -> PyResult<Self> {
        let phi = Arc::clone(&dataset.inner.train.phi);
        let inner = UtrrParams::init(phi, layers, top_k).py()?.with_rcc(rcc);
        Ok(PyModel { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (path, dataset, rcc = true))]
    fn load(path: PathBuf, dataset: &PyDataset, rcc: bool) -> PyResult<Self> {
        let phi: Arc<MeasurementMatrix> = Arc::clone(&dataset.inner.train.phi);
        formats::read_model(&path, phi, rcc).py().map(|inner| PyModel { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        formats::write_model(&path, &self.inner).py()
    }

    #[getter]
    fn n_layers(&self) -> usize {
        self.inner.n_layers()
    }

    #[getter]
    fn top_k(&self) -> usize {
        self.inner.top_k_last
    }

    #[getter]
    fn rcc(&self) -> bool {
        self.inner.rcc
    }

    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    /// `(rho, alpha)` of every layer.
    fn scalars(&self) -> Vec<(f64, f64)> {
        self.inner.layers.iter().map(|l| (l.rho, l.alpha)).collect()
    }

    fn predict(&self, y: Vec<f64>) -> PyResult<Vec<f64>> {
        utrr::predict(&self.inner, &DVector::from_vec(y))
            .py()
            .map(|x| vec_of(&x))
    }

    /// Train on the dataset's train split with early stopping on its
    /// validation split. Returns the best model and the per-epoch
    /// `(train_loss, val_loss)` history.
    fn train(&self, dataset: &PyDataset, config: &PyConfig) -> PyResult<(PyModel, Vec<(f64, f64)>)> {
        let tc = config.inner.train_config();
        let (params, history) = utrr::train(&self.inner, &dataset.inner.train, &dataset.inner.val, &tc).py()?;
        let losses = history.epochs.iter().map(|e| (e.train_loss, e.val_loss)).collect();
        Ok((PyModel { inner: params }, losses))
    }
}

/// Average of the members' reconstructions.
#[pyfunction]
fn ensemble_predict(models: Vec<PyRef<'_, PyModel>>, y: Vec<f64>) -> PyResult<Vec<f64>> {
    let members: Vec<UtrrParams> = models.iter().map(|m| m.inner.clone()).collect();
    utrr::ensemble_predict(&members, &DVector::from_vec(y))
        .py()
        .map(|x| vec_of(&x))
}

#[pymodule]
fn pytrr(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PySolveResult>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(load_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(itrr, m)?)?;
    m.add_function(wrap_pyfunction!(itrr_bb, m)?)?;
    m.add_function(wrap_pyfunction!(ridge, m)?)?;
    m.add_function(wrap_pyfunction!(lasso, m)?)?;
    m.add_function(wrap_pyfunction!(omp, m)?)?;
    m.add_function(wrap_pyfunction!(objective, m)?)?;
    m.add_function(wrap_pyfunction!(gradient, m)?)?;
    m.add_function(wrap_pyfunction!(top_k_sq_norm, m)?)?;
    m.add_function(wrap_pyfunction!(trim_top_k, m)?)?;
    m.add_function(wrap_pyfunction!(lift, m)?)?;
    m.add_function(wrap_pyfunction!(unlift, m)?)?;
    m.add_function(wrap_pyfunction!(nmse_db, m)?)?;
    m.add_function(wrap_pyfunction!(zf_sum_rate, m)?)?;
    m.add_function(wrap_pyfunction!(ensemble_predict, m)?)?;
    Ok(())
}
