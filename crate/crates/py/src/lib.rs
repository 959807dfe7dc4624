//! Python bindings. Coordinates must already lie in the unit square; data are
//! taken as given (standardize first).

use nnvecchia::inference::{fit_mle, fit_mle_surrogate, run_mcmc, McmcConfig, MleConfig, PriorSpec};
use nnvecchia::kernel::{CovarianceParams, FullParams};
use nnvecchia::predict::{predict_sites, predict_sites_surrogate, Observed};
use nnvecchia::spatial::{build_graph, LocationSet, OrderedNeighborGraph, Point};
use nnvecchia::surrogate::{load_bank, save_bank, train_bank, BankConfig, SurrogateBank, SurrogateProvider};
use nnvecchia::vecchia::{simulate_field, vecchia_loglik, CachedExactProvider, ExactProvider, KrigingProvider};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: nnvecchia::Error) -> PyErr {
    match e {
        nnvecchia::Error::InvalidArgument(_)
        | nnvecchia::Error::Domain(_)
        | nnvecchia::Error::DimensionMismatch { .. }
        | nnvecchia::Error::DuplicateLocation { .. }
        | nnvecchia::Error::DegenerateDomain
        | nnvecchia::Error::OutOfEnvelope { .. }
        | nnvecchia::Error::BankMismatch { .. } => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

/// Range `phi`, smoothness `nu` and spatial share `r`.
#[pyclass(name = "CovarianceParams", frozen, eq, from_py_object)]
#[derive(Clone, Copy, PartialEq)]
struct PyParams(CovarianceParams);

#[pymethods]
impl PyParams {
    #[new]
    fn new(phi: f64, nu: f64, r: f64) -> PyResult<Self> {
        CovarianceParams::new(phi, nu, r).map(Self).map_err(err)
    }

    #[getter]
    fn phi(&self) -> f64 {
        self.0.phi
    }

    #[getter]
    fn nu(&self) -> f64 {
        self.0.nu
    }

    #[getter]
    fn r(&self) -> f64 {
        self.0.r
    }

    fn __repr__(&self) -> String {
        format!("CovarianceParams(phi={}, nu={}, r={})", self.0.phi, self.0.nu, self.0.r)
    }
}

/// Accepts a `CovarianceParams` or a `(phi, nu, r)` tuple.
fn theta(obj: &Bound<'_, PyAny>) -> PyResult<CovarianceParams> {
    if let Ok(p) = obj.extract::<PyParams>() {
        return Ok(p.0);
    }
    let (phi, nu, r): (f64, f64, f64) = obj.extract()?;
    CovarianceParams::new(phi, nu, r).map_err(err)
}

#[pyclass(name = "SurrogateBank", frozen)]
struct PyBank(SurrogateBank);

#[pymethods]
impl PyBank {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        load_bank(path).map(Self).map_err(err)
    }

    /// Desk-profile training with optional overrides. Takes minutes at the defaults.
    #[staticmethod]
    #[pyo3(signature = (m=30, seed=1, replicates=None, n_min=None, n_max=None, epochs=None))]
    fn train(
        py: Python<'_>,
        m: usize,
        seed: u64,
        replicates: Option<usize>,
        n_min: Option<usize>,
        n_max: Option<usize>,
        epochs: Option<usize>,
    ) -> PyResult<Self> {
        let mut cfg = BankConfig::desk(m, seed);
        if let Some(v) = replicates {
            cfg.data.replicates = v;
        }
        if let Some(v) = n_min {
            cfg.data.n_range.0 = v;
        }
        if let Some(v) = n_max {
            cfg.data.n_range.1 = v;
        }
        if let Some(v) = epochs {
            cfg.train.epochs = v;
        }
        cfg.data.validate().map_err(err)?;
        py.detach(|| train_bank(&cfg)).map(Self).map_err(err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_bank(&self.0, path).map_err(err)
    }

    #[getter]
    fn m(&self) -> usize {
        self.0.m()
    }

    #[getter]
    fn data_hash(&self) -> String {
        self.0.metadata().data_hash.clone()
    }

    fn __repr__(&self) -> String {
        format!("SurrogateBank(m={}, bins={})", self.0.m(), self.0.bins().len())
    }
}

fn graph(points: &[Point], m: usize) -> PyResult<OrderedNeighborGraph> {
    let locs = LocationSet::from_unit_coords(points.to_vec()).map_err(err)?;
    build_graph(&locs, m).map_err(err)
}

fn to_points(xy: Vec<(f64, f64)>) -> Vec<Point> {
    xy.into_iter().map(|(x, y)| [x, y]).collect()
}

/// Draw a field at `points` with exact weights on an `m`-neighbour graph.
#[pyfunction]
#[pyo3(signature = (points, theta, mu=0.0, sigma2=1.0, m=80, seed=1))]
fn simulate(points: Vec<(f64, f64)>, theta: &Bound<'_, PyAny>, mu: f64, sigma2: f64, m: usize, seed: u64) -> PyResult<Vec<f64>> {
    let pts = to_points(points);
    let g = graph(&pts, m)?;
    let params = FullParams { mu, sigma2, theta: self::theta(theta)?, beta: None };
    simulate_field(&pts, &g, &params, seed).map_err(err)
}

/// Vecchia log-likelihood; exact weights unless a bank is given, whose `m` then applies.
#[pyfunction]
#[pyo3(signature = (points, z, theta, m=30, mu=0.0, sigma2=1.0, bank=None))]
fn loglik(
    points: Vec<(f64, f64)>,
    z: Vec<f64>,
    theta: &Bound<'_, PyAny>,
    m: usize,
    mu: f64,
    sigma2: f64,
    bank: Option<PyRef<'_, PyBank>>,
) -> PyResult<f64> {
    let pts = to_points(points);
    let b = bank.as_ref().map(|b| &b.0);
    let g = graph(&pts, b.map_or(m, |b| b.m()))?;
    let params = FullParams { mu, sigma2, theta: self::theta(theta)?, beta: None };
    match b {
        Some(b) => vecchia_loglik(&z, &pts, &g, &SurrogateProvider::new(b), &params),
        None => vecchia_loglik(&z, &pts, &g, &ExactProvider, &params),
    }
    .map_err(err)
}

/// Maximum-likelihood estimate on the standardized process.
#[pyfunction]
#[pyo3(name = "fit_mle", signature = (points, z, m=30, bank=None, tol=1e-7, seed=1))]
fn fit_mle_py<'py>(
    py: Python<'py>,
    points: Vec<(f64, f64)>,
    z: Vec<f64>,
    m: usize,
    bank: Option<PyRef<'py, PyBank>>,
    tol: f64,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let pts = to_points(points);
    let b = bank.as_ref().map(|b| &b.0);
    let g = graph(&pts, b.map_or(m, |b| b.m()))?;
    let mut cfg = MleConfig { tol, ..MleConfig::default() };
    cfg.variogram.seed = seed;
    let res = py
        .detach(|| match b {
            Some(b) => fit_mle_surrogate(&z, &pts, &g, b, &cfg),
            None => fit_mle(&z, &pts, &g, &CachedExactProvider::new(&pts, &g), &cfg),
        })
        .map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("estimate", PyParams(res.estimate))?;
    d.set_item("loglik", res.loglik)?;
    d.set_item("converged", res.converged)?;
    d.set_item("stalled", res.stalled)?;
    d.set_item("iterations", res.iterations)?;
    Ok(d)
}

/// Metropolis-Hastings draws of `(phi, nu, r)`; the chains include burn-in.
#[pyfunction]
#[pyo3(signature = (points, z, m=30, bank=None, iterations=12000, burn_in=2000, tune=0.1, init=None, seed=1))]
#[allow(clippy::too_many_arguments)]
fn fit_mcmc<'py>(
    py: Python<'py>,
    points: Vec<(f64, f64)>,
    z: Vec<f64>,
    m: usize,
    bank: Option<PyRef<'py, PyBank>>,
    iterations: usize,
    burn_in: usize,
    tune: f64,
    init: Option<&Bound<'py, PyAny>>,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let pts = to_points(points);
    let b = bank.as_ref().map(|b| &b.0);
    let g = graph(&pts, b.map_or(m, |b| b.m()))?;
    let cfg = McmcConfig { iterations, burn_in, tune: [tune; 3], init: init.map(theta).transpose()?, ..McmcConfig::default() };
    cfg.validate().map_err(err)?;
    let chain = py
        .detach(|| {
            let cached;
            let sur;
            let provider: &dyn KrigingProvider = match b {
                Some(b) => {
                    sur = SurrogateProvider::new(b);
                    &sur
                }
                None => {
                    cached = CachedExactProvider::new(&pts, &g);
                    &cached
                }
            };
            run_mcmc(&z, &pts, &g, provider, &PriorSpec::default(), &cfg, seed)
        })
        .map_err(err)?;
    let summary = chain.summary().map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("r", chain.r())?;
    d.set_item("phi", &chain.phi)?;
    d.set_item("nu", &chain.nu)?;
    d.set_item("log_post", &chain.log_post)?;
    d.set_item("burn_in", chain.burn_in)?;
    d.set_item("acceptance", [summary.phi.acceptance, summary.nu.acceptance, summary.r.acceptance])?;
    d.set_item("ess", [summary.phi.ess, summary.nu.ess, summary.r.ess])?;
    Ok(d)
}

/// Kriging means and variances at `test` from the `m` nearest training sites.
#[pyfunction]
#[pyo3(signature = (train, z, test, theta, m=30, mu=0.0, sigma2=1.0, bank=None))]
#[allow(clippy::too_many_arguments)]
fn predict(
    train: Vec<(f64, f64)>,
    z: Vec<f64>,
    test: Vec<(f64, f64)>,
    theta: &Bound<'_, PyAny>,
    m: usize,
    mu: f64,
    sigma2: f64,
    bank: Option<PyRef<'_, PyBank>>,
) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let (train, test) = (to_points(train), to_points(test));
    let obs = Observed { points: &train, data: &z };
    let t = self::theta(theta)?;
    let res = match &bank {
        Some(b) => predict_sites_surrogate(&obs, &test, &t, mu, sigma2, &b.0),
        None => predict_sites(&obs, &test, &t, mu, sigma2, m),
    }
    .map_err(err)?;
    Ok((res.mean, res.variance))
}

#[pymodule]
fn pynnvecchia(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyParams>()?;
    m.add_class::<PyBank>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(loglik, m)?)?;
    m.add_function(wrap_pyfunction!(fit_mle_py, m)?)?;
    m.add_function(wrap_pyfunction!(fit_mcmc, m)?)?;
    m.add_function(wrap_pyfunction!(predict, m)?)?;
    Ok(())
}
