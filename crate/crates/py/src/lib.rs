//! Python bindings. Reports come back as plain dicts; networks, lines,
//! candidate sets and oracles are wrapped classes.

use std::sync::Mutex;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

use relu_extract::extraction::{self, Knobs};
use relu_extract::harness::{self, ExperimentConfig, TargetKind};
use relu_extract::model;
use relu_extract::oracle::{self as core_oracle, InProcessOracle, ServerHandle, TcpOracle};
use relu_extract::regression::{self, RegressionConfig};
use relu_extract::{geometry, Error};

fn err(e: Error) -> PyErr {
    match e.root() {
        Error::Input(_) | Error::Format(_) => PyValueError::new_err(e.to_string()),
        Error::Transport(_) => PyOSError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn to_dict<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let s = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (s,))
}

#[pyclass(name = "Network", module = "relu_extract_py", from_py_object)]
#[derive(Clone)]
struct Network(model::Network);

#[pymethods]
impl Network {
    #[staticmethod]
    fn from_json(s: &str) -> PyResult<Self> {
        model::Network::from_json(s).map(Network).map_err(err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        model::Network::load(path).map(Network).map_err(err)
    }

    #[staticmethod]
    fn zero(dim: usize) -> Self {
        Network(model::Network::zero(dim))
    }

    fn to_json(&self) -> PyResult<String> {
        self.0.to_json().map_err(err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.0.save(path).map_err(err)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim
    }

    #[getter]
    fn k(&self) -> usize {
        self.0.k()
    }

    /// Neurons as `{"s", "w", "b"}` dicts, with `"c"` for learned output weights.
    fn neurons<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_dict(py, &self.0.neurons)
    }

    fn evaluate(&self, x: Vec<f64>) -> PyResult<f64> {
        self.0.evaluate(&x).map_err(err)
    }

    fn evaluate_many(&self, xs: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        xs.iter().map(|x| self.0.evaluate(x).map_err(err)).collect()
    }

    fn gradient(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.0.gradient(&x).map_err(err)
    }

    /// Sorted `(t, neuron_index)` pairs where the line crosses a neuron boundary.
    fn critical_points(&self, line: &GaussianLine) -> PyResult<Vec<(f64, usize)>> {
        let cp = self.0.critical_points(&line.0).map_err(err)?;
        Ok(cp.points.iter().map(|p| (p.t, p.neuron_index)).collect())
    }

    fn __repr__(&self) -> String {
        format!("Network(dim={}, k={})", self.0.dim, self.0.k())
    }
}

#[pyclass(name = "GaussianLine", module = "relu_extract_py", from_py_object)]
#[derive(Clone)]
struct GaussianLine(model::GaussianLine);

#[pymethods]
impl GaussianLine {
    #[new]
    fn new(x0: Vec<f64>, v: Vec<f64>) -> PyResult<Self> {
        model::GaussianLine::new(x0, v).map(GaussianLine).map_err(err)
    }

    #[staticmethod]
    fn sample(d: usize, seed: u64) -> PyResult<Self> {
        extraction::sample_gaussian_line(d, seed).map(GaussianLine).map_err(err)
    }

    #[getter]
    fn x0(&self) -> Vec<f64> {
        self.0.x0.clone()
    }

    #[getter]
    fn v(&self) -> Vec<f64> {
        self.0.v.clone()
    }

    fn point(&self, t: f64) -> Vec<f64> {
        self.0.point(t)
    }
}

#[pyclass(name = "ExtractionParams", module = "relu_extract_py", from_py_object)]
#[derive(Clone)]
struct ExtractionParams(extraction::ExtractionParams);

#[pymethods]
impl ExtractionParams {
    /// `knobs` maps knob names (`poly_const`, `c_r`, `c_tau`, `c_alpha`,
    /// `c_bias`, `w_min`) to values; missing knobs keep their defaults.
    #[new]
    #[pyo3(signature = (epsilon, delta, k, R, B, knobs=None, lines=1, max_intervals=None))]
    #[allow(non_snake_case)]
    fn new(
        epsilon: f64,
        delta: f64,
        k: usize,
        R: f64,
        B: f64,
        knobs: Option<Vec<(String, f64)>>,
        lines: usize,
        max_intervals: Option<u64>,
    ) -> PyResult<Self> {
        let mut kn = Knobs::default();
        for (name, v) in knobs.unwrap_or_default() {
            kn.set(&name, v).map_err(err)?;
        }
        let mut p = extraction::ExtractionParams::new(epsilon, delta, k, R, B).with_knobs(kn);
        p.lines = lines;
        if let Some(m) = max_intervals {
            p.max_intervals = m;
        }
        p.validate().map_err(err)?;
        Ok(ExtractionParams(p))
    }

    /// `{"Delta", "r", "tau", "alpha_fd", "m"}` for dimension `d`.
    fn schedule<'py>(&self, py: Python<'py>, d: usize) -> PyResult<Bound<'py, PyAny>> {
        to_dict(py, &extraction::schedule(&self.0, d).map_err(err)?)
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.0)
    }
}

#[pyclass(name = "CandidateSet", module = "relu_extract_py", from_py_object)]
#[derive(Clone)]
struct CandidateSet(extraction::CandidateSet);

#[pymethods]
impl CandidateSet {
    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn entries<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_dict(py, &self.0.entries)
    }

    #[pyo3(signature = (w, b, tol=1e-6))]
    fn contains_neuron(&self, w: Vec<f64>, b: f64, tol: f64) -> bool {
        self.0.contains_neuron(&w, b, tol)
    }

    fn to_json(&self) -> PyResult<String> {
        self.0.to_json().map_err(err)
    }

    #[staticmethod]
    fn from_json(s: &str) -> PyResult<Self> {
        extraction::CandidateSet::from_json(s).map(CandidateSet).map_err(err)
    }
}

/// A query oracle. Extraction code only sees values and the query count.
#[pyclass(name = "Oracle", module = "relu_extract_py")]
struct Oracle(Box<dyn core_oracle::Oracle>);

#[pymethods]
impl Oracle {
    #[staticmethod]
    #[pyo3(signature = (network, budget=None))]
    fn in_process(network: &Network, budget: Option<u64>) -> Self {
        Oracle(Box::new(InProcessOracle::with_budget(network.0.clone(), budget)))
    }

    #[staticmethod]
    fn connect(addr: &str) -> PyResult<Self> {
        Ok(Oracle(Box::new(TcpOracle::connect(addr).map_err(err)?)))
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    #[getter]
    fn query_count(&self) -> u64 {
        self.0.query_count()
    }

    fn query(&self, x: Vec<f64>) -> PyResult<f64> {
        self.0.query(&x).map_err(err)
    }

    fn query_batch(&self, xs: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        let flat: Vec<f64> = xs.into_iter().flatten().collect();
        self.0.query_batch(&flat).map_err(err)
    }
}

/// Wire-protocol server running in background threads.
#[pyclass(name = "Server", module = "relu_extract_py")]
struct Server {
    addr: String,
    handle: Mutex<Option<ServerHandle>>,
}

#[pymethods]
impl Server {
    #[getter]
    fn addr(&self) -> String {
        self.addr.clone()
    }

    #[getter]
    fn query_count(&self) -> u64 {
        self.handle.lock().unwrap().as_ref().map_or(0, |h| h.query_count())
    }

    fn shutdown(&self) {
        if let Some(h) = self.handle.lock().unwrap().take() {
            h.shutdown();
        }
    }
}

#[pyfunction]
#[pyo3(signature = (network, addr="127.0.0.1:0", budget=None))]
fn serve(network: &Network, addr: &str, budget: Option<u64>) -> PyResult<Server> {
    let h = core_oracle::serve(network.0.clone(), addr, budget).map_err(err)?;
    Ok(Server {
        addr: h.addr().to_string(),
        handle: Mutex::new(Some(h)),
    })
}

#[pyfunction]
fn relu_correlation(v: Vec<f64>, v_prime: Vec<f64>) -> PyResult<f64> {
    model::relu_correlation(&v, &v_prime).map_err(err)
}

/// `(mean, std_error)` of `E[(A(x) − B(x))²]` over `n` Gaussian samples.
#[pyfunction]
#[pyo3(signature = (a, b, n=model::DEFAULT_MC_SAMPLES, seed=0))]
fn l2_distance_mc(a: &Network, b: &Network, n: usize, seed: u64) -> PyResult<(f64, f64)> {
    let e = model::l2_distance_mc(&a.0, &b.0, n, seed).map_err(err)?;
    Ok((e.mean, e.std_error))
}

/// `(|sin ∠|, α)`: the tightest closeness parameters for two neurons.
#[pyfunction]
fn closeness(v: Vec<f64>, b: f64, v_prime: Vec<f64>, b_prime: f64) -> PyResult<(f64, f64)> {
    geometry::closeness_measures(&v, b, &v_prime, b_prime).map_err(err)
}

/// Kinds: `random-separated[:MIN_SIN]`, `random-clumped:CLUMPS:DELTA:ALPHA`,
/// `bump:A:WIDTH`, `cancelling-pair`, `file:PATH`.
#[pyfunction]
#[pyo3(signature = (kind, d, k, R, B, seed=0))]
#[allow(non_snake_case)]
fn generate_target(kind: &str, d: usize, k: usize, R: f64, B: f64, seed: u64) -> PyResult<Network> {
    let kind = TargetKind::parse(kind).map_err(err)?;
    harness::generate_target(&kind, d, k, R, B, seed).map(Network).map_err(err)
}

#[pyfunction]
fn get_bias(oracle: &Oracle, line: &GaussianLine, lo: f64, hi: f64) -> PyResult<(f64, bool)> {
    let b = extraction::get_bias(oracle.0.as_ref(), &line.0, lo, hi).map_err(err)?;
    Ok((b.intercept, b.valid))
}

#[pyfunction]
fn get_gradient(oracle: &Oracle, x: Vec<f64>, alpha: f64, seed: u64) -> PyResult<Vec<f64>> {
    extraction::get_gradient(oracle.0.as_ref(), &x, alpha, seed).map_err(err)
}

#[pyfunction]
fn get_neurons<'py>(
    py: Python<'py>,
    oracle: &Oracle,
    params: &ExtractionParams,
    seed: u64,
) -> PyResult<(CandidateSet, Bound<'py, PyAny>)> {
    let (set, report) = py
        .detach(|| extraction::get_neurons(oracle.0.as_ref(), &params.0, seed))
        .map_err(err)?;
    Ok((CandidateSet(set), to_dict(py, &report)?))
}

/// Returns `(network, candidates, report)`.
#[pyfunction]
#[pyo3(signature = (oracle, params, seed, n_samples=None))]
fn learn_from_queries<'py>(
    py: Python<'py>,
    oracle: &Oracle,
    params: &ExtractionParams,
    seed: u64,
    n_samples: Option<usize>,
) -> PyResult<(Network, CandidateSet, Bound<'py, PyAny>)> {
    let cfg = RegressionConfig {
        n_samples,
        ..RegressionConfig::default()
    };
    let out = py
        .detach(|| regression::learn_from_queries(oracle.0.as_ref(), &params.0, &cfg, seed))
        .map_err(err)?;
    Ok((Network(out.network), CandidateSet(out.candidates), to_dict(py, &out.report)?))
}

/// Run an experiment described by a TOML document; returns the report.
#[pyfunction]
fn run_experiment<'py>(py: Python<'py>, config_toml: &str) -> PyResult<Bound<'py, PyAny>> {
    let cfg = ExperimentConfig::from_toml(config_toml).map_err(err)?;
    let out = py.detach(|| harness::run_experiment(&cfg)).map_err(err)?;
    to_dict(py, &out.report)
}

#[pymodule]
pub fn relu_extract_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Network>()?;
    m.add_class::<GaussianLine>()?;
    m.add_class::<ExtractionParams>()?;
    m.add_class::<CandidateSet>()?;
    m.add_class::<Oracle>()?;
    m.add_class::<Server>()?;
    m.add_function(wrap_pyfunction!(serve, m)?)?;
    m.add_function(wrap_pyfunction!(relu_correlation, m)?)?;
    m.add_function(wrap_pyfunction!(l2_distance_mc, m)?)?;
    m.add_function(wrap_pyfunction!(closeness, m)?)?;
    m.add_function(wrap_pyfunction!(generate_target, m)?)?;
    m.add_function(wrap_pyfunction!(get_bias, m)?)?;
    m.add_function(wrap_pyfunction!(get_gradient, m)?)?;
    m.add_function(wrap_pyfunction!(get_neurons, m)?)?;
    m.add_function(wrap_pyfunction!(learn_from_queries, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
