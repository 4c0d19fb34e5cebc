//! Python bindings. Structured inputs and outputs cross the boundary as plain
//! dicts and lists with the same field names as the JSON forms.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

use servetune::calibration::Sampler;
use servetune::model::{LoadPattern, RequestRecord, RuntimeConfig};
use servetune::sim::{SimBackend, SimProfile};
use servetune::slo::SloSpec;
use servetune::steady_state::StabilityDiagnostics;
use servetune::sweep::{SweepConfig, SweepResult};
use servetune::tuner::{SearchSpace, TunerConfig};
use servetune::{calibration, flow, tuner, InferenceBackend, SamplingStrategy, TokenCorpus};

fn value_error(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_error(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

/// Converts a Python object into `T` through its JSON form.
fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let json = obj.py().import("json")?;
    let text: String = json.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(value_error)
}

fn from_py_or_default<T: DeserializeOwned + Default>(obj: Option<&Bound<'_, PyAny>>) -> PyResult<T> {
    obj.map_or_else(|| Ok(T::default()), from_py)
}

fn to_py<'py>(py: Python<'py>, value: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(runtime_error)?;
    py.import("json")?.call_method1("loads", (text,))
}

#[pyclass(name = "LoadPattern", module = "servetune", from_py_object)]
#[derive(Clone)]
struct PyLoadPattern(LoadPattern);

#[pymethods]
impl PyLoadPattern {
    #[new]
    #[pyo3(signature = (input_len, output_len, prefix_len = 0, duration = 60.0, seed = 0))]
    fn new(input_len: u32, output_len: u32, prefix_len: u32, duration: f64, seed: u64) -> PyResult<Self> {
        let p = LoadPattern::new(input_len, output_len).with_prefix(prefix_len).with_duration(duration).with_seed(seed);
        p.validate().map_err(value_error)?;
        Ok(Self(p))
    }

    #[getter]
    fn input_len(&self) -> u32 {
        self.0.input_len
    }

    #[getter]
    fn output_len(&self) -> u32 {
        self.0.output_len
    }

    #[getter]
    fn prefix_len(&self) -> u32 {
        self.0.prefix_len
    }

    #[getter]
    fn duration(&self) -> f64 {
        self.0.duration
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.0.seed
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.0)
    }

    fn __repr__(&self) -> String {
        format!(
            "LoadPattern(input_len={}, output_len={}, prefix_len={}, duration={}, seed={})",
            self.0.input_len, self.0.output_len, self.0.prefix_len, self.0.duration, self.0.seed
        )
    }
}

#[pyclass(name = "RuntimeConfig", module = "servetune", from_py_object)]
#[derive(Clone)]
struct PyRuntimeConfig(RuntimeConfig);

#[pymethods]
impl PyRuntimeConfig {
    #[new]
    #[pyo3(signature = (tensor_parallel, max_num_seqs, max_batched_tokens, max_context, data_parallel = 1))]
    fn new(tensor_parallel: u32, max_num_seqs: u32, max_batched_tokens: u32, max_context: u32, data_parallel: u32) -> Self {
        Self(RuntimeConfig { tensor_parallel, data_parallel, max_num_seqs, max_batched_tokens, max_context })
    }

    /// Default configuration sized for `pattern`.
    #[staticmethod]
    fn default_for(pattern: &PyLoadPattern) -> Self {
        Self(RuntimeConfig::default_for(&pattern.0))
    }

    fn validate(&self, pattern: &PyLoadPattern) -> PyResult<()> {
        self.0.validate(&pattern.0).map_err(value_error)
    }

    fn gpus(&self) -> u32 {
        self.0.gpus()
    }

    #[getter]
    fn tensor_parallel(&self) -> u32 {
        self.0.tensor_parallel
    }

    #[getter]
    fn data_parallel(&self) -> u32 {
        self.0.data_parallel
    }

    #[getter]
    fn max_num_seqs(&self) -> u32 {
        self.0.max_num_seqs
    }

    #[getter]
    fn max_batched_tokens(&self) -> u32 {
        self.0.max_batched_tokens
    }

    #[getter]
    fn max_context(&self) -> u32 {
        self.0.max_context
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.0)
    }

    fn __repr__(&self) -> String {
        let c = &self.0;
        format!(
            "RuntimeConfig(tensor_parallel={}, data_parallel={}, max_num_seqs={}, max_batched_tokens={}, max_context={})",
            c.tensor_parallel, c.data_parallel, c.max_num_seqs, c.max_batched_tokens, c.max_context
        )
    }
}

#[pyclass(name = "StabilityDiagnostics", module = "servetune", frozen, skip_from_py_object)]
struct PyStability(StabilityDiagnostics);

#[pymethods]
impl PyStability {
    #[getter]
    fn beta(&self) -> f64 {
        self.0.beta
    }

    #[getter]
    fn alpha(&self) -> f64 {
        self.0.alpha
    }

    #[getter]
    fn r2(&self) -> f64 {
        self.0.r2
    }

    #[getter]
    fn tolerance(&self) -> f64 {
        self.0.tolerance
    }

    #[getter]
    fn is_stable(&self) -> bool {
        self.0.is_stable
    }

    fn __repr__(&self) -> String {
        let d = &self.0;
        format!("StabilityDiagnostics(beta={}, alpha={}, r2={}, is_stable={})", d.beta, d.alpha, d.r2, d.is_stable)
    }
}

#[pyclass(name = "SweepResult", module = "servetune", frozen, skip_from_py_object)]
struct PySweepResult(SweepResult);

#[pymethods]
impl PySweepResult {
    /// `"FEASIBLE"` or `"INFEASIBLE"`.
    #[getter]
    fn status(&self) -> PyResult<String> {
        let v = serde_json::to_value(self.0.status).map_err(runtime_error)?;
        Ok(v.as_str().unwrap_or_default().to_string())
    }

    #[getter]
    fn best_rate(&self) -> f64 {
        self.0.best_rate
    }

    #[getter]
    fn lower_bound(&self) -> f64 {
        self.0.lower_bound
    }

    #[getter]
    fn converged(&self) -> bool {
        self.0.converged
    }

    #[getter]
    fn open_loop_trials(&self) -> usize {
        self.0.open_loop_trials().count()
    }

    /// `(rate, passed)` for each open-loop trial.
    #[getter]
    fn rates(&self) -> Vec<(f64, bool)> {
        self.0.summary().rates
    }

    /// Full result including per-request records.
    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.0)
    }

    fn __repr__(&self) -> PyResult<String> {
        Ok(format!(
            "SweepResult(status={}, best_rate={}, open_loop_trials={})",
            self.status()?,
            self.0.best_rate,
            self.open_loop_trials()
        ))
    }
}

/// Least-squares completion-vs-arrival fit over completed requests.
#[pyfunction]
#[pyo3(signature = (arrivals, completions, tolerance = 0.05))]
fn fit_stability(arrivals: Vec<f64>, completions: Vec<f64>, tolerance: f64) -> PyResult<PyStability> {
    if arrivals.len() != completions.len() {
        return Err(PyValueError::new_err("arrivals and completions differ in length"));
    }
    let records: Vec<RequestRecord> = arrivals
        .iter()
        .zip(&completions)
        .enumerate()
        .map(|(i, (&a, &c))| RequestRecord::ok(i as u64, a, c, c, 1))
        .collect();
    servetune::fit_stability(&records, tolerance).map(PyStability).map_err(value_error)
}

/// Per-GPU fitness with a penalty when SLOs are violated.
#[pyfunction]
#[pyo3(signature = (throughput, gpus, violated, penalty = tuner::DEFAULT_PENALTY))]
fn fitness(throughput: f64, gpus: u32, violated: bool, penalty: f64) -> f64 {
    tuner::fitness(throughput, gpus, violated, penalty)
}

/// Runs a capacity sweep against the simulator.
#[pyfunction]
#[pyo3(signature = (pattern, runtime = None, slos = None, sweep = None, profile = None))]
fn sweep_sim(
    py: Python<'_>,
    pattern: &PyLoadPattern,
    runtime: Option<&PyRuntimeConfig>,
    slos: Option<&Bound<'_, PyAny>>,
    sweep: Option<&Bound<'_, PyAny>>,
    profile: Option<&Bound<'_, PyAny>>,
) -> PyResult<PySweepResult> {
    let slos: SloSpec = from_py_or_default(slos)?;
    let config = SweepConfig { slos, ..from_py_or_default(sweep)? };
    let profile: SimProfile = from_py_or_default(profile)?;
    let runtime = runtime.map_or_else(|| RuntimeConfig::default_for(&pattern.0), |r| r.0);
    let mut backend = SimBackend::new(profile.model(runtime)).map_err(value_error)?;
    let pattern = pattern.0.clone();
    let result = py.detach(move || servetune::run_sweep(&config, &pattern, &mut backend as &mut dyn InferenceBackend));
    result.map(PySweepResult).map_err(value_error)
}

/// Searches runtime configurations on the simulator. Returns the tuning
/// archive as a dict.
#[pyfunction]
#[pyo3(signature = (pattern, slos = None, tuner = None, space = None, max_gpus = 8, profile = None))]
fn tune_sim<'py>(
    py: Python<'py>,
    pattern: &PyLoadPattern,
    slos: Option<&Bound<'py, PyAny>>,
    tuner: Option<&Bound<'py, PyAny>>,
    space: Option<&Bound<'py, PyAny>>,
    max_gpus: u32,
    profile: Option<&Bound<'py, PyAny>>,
) -> PyResult<Bound<'py, PyAny>> {
    let slos: SloSpec = from_py_or_default(slos)?;
    let config: TunerConfig = from_py_or_default(tuner)?;
    let space: SearchSpace = match space {
        Some(s) => from_py(s)?,
        None => SearchSpace::for_pattern(&pattern.0, max_gpus),
    };
    let profile: SimProfile = from_py_or_default(profile)?;
    let pattern = pattern.0.clone();
    let result = py.detach(move || {
        let factory = move |c: &RuntimeConfig| -> Result<Box<dyn InferenceBackend>, servetune::BackendError> {
            Ok(Box::new(SimBackend::new(profile.model(*c))?))
        };
        servetune::run_tuning(&space, &pattern, &slos, &factory, &config)
    });
    to_py(py, &result.map_err(value_error)?.archive())
}

/// Draws a calibration subset from `sequences`.
#[pyfunction]
#[pyo3(signature = (sequences, n, seed, strategy = "UNIFORM"))]
fn sample_calibration(sequences: Vec<Vec<u32>>, n: usize, seed: u64, strategy: &str) -> PyResult<Vec<Vec<u32>>> {
    let strategy: SamplingStrategy = serde_json::from_value(serde_json::Value::from(strategy)).map_err(value_error)?;
    let corpus = TokenCorpus::new(sequences).map_err(value_error)?;
    let subset = Sampler::new(strategy).sample(&corpus, n, seed).map_err(value_error)?;
    Ok(subset.sequences)
}

/// Built-in quantization recipe by name.
#[pyfunction]
fn get_recipe<'py>(py: Python<'py>, name: &str) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &calibration::get_recipe(name).map_err(value_error)?)
}

/// Validates a job specification (dict or JSON string) and returns its
/// normalized form.
#[pyfunction]
fn validate_spec<'py>(py: Python<'py>, spec: &Bound<'py, PyAny>) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &parse(spec)?)
}

fn parse(spec: &Bound<'_, PyAny>) -> PyResult<flow::JobSpec> {
    let value: serde_json::Value = match spec.extract::<String>() {
        Ok(text) => serde_json::from_str(&text).map_err(value_error)?,
        Err(_) => from_py(spec)?,
    };
    flow::validate_spec(&value).map_err(value_error)
}

/// Runs a job with the mock compression backend. Returns the flow summary and
/// the archive as JSON-lines text.
#[pyfunction]
fn submit<'py>(py: Python<'py>, spec: &Bound<'py, PyAny>) -> PyResult<(Bound<'py, PyAny>, String)> {
    let spec = parse(spec)?;
    let outcome = py.detach(move || flow::submit(&spec));
    let summary = outcome.archive.summary().ok_or_else(|| PyRuntimeError::new_err("archive has no result record"))?;
    Ok((to_py(py, summary)?, outcome.archive.to_jsonl()))
}

/// Reads an archive file into a list of record dicts, header first.
#[pyfunction]
fn read_archive<'py>(py: Python<'py>, path: std::path::PathBuf) -> PyResult<Bound<'py, PyAny>> {
    let archive = flow::Archive::read(&path).map_err(value_error)?;
    to_py(py, &archive.records)
}

#[pymodule]
#[pyo3(name = "servetune")]
fn servetune_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyLoadPattern>()?;
    m.add_class::<PyRuntimeConfig>()?;
    m.add_class::<PyStability>()?;
    m.add_class::<PySweepResult>()?;
    m.add_function(wrap_pyfunction!(fit_stability, m)?)?;
    m.add_function(wrap_pyfunction!(fitness, m)?)?;
    m.add_function(wrap_pyfunction!(sweep_sim, m)?)?;
    m.add_function(wrap_pyfunction!(tune_sim, m)?)?;
    m.add_function(wrap_pyfunction!(sample_calibration, m)?)?;
    m.add_function(wrap_pyfunction!(get_recipe, m)?)?;
    m.add_function(wrap_pyfunction!(validate_spec, m)?)?;
    m.add_function(wrap_pyfunction!(submit, m)?)?;
    m.add_function(wrap_pyfunction!(read_archive, m)?)?;
    m.add("SCHEMA_VERSION", flow::archive::SCHEMA_VERSION)?;
    Ok(())
}
