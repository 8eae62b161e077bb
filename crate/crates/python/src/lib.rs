//! Python bindings. Structured values cross the boundary as plain Python
//! dicts and lists (converted through JSON), so results look exactly like
//! the JSONL artifacts the CLI writes.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;
use synthex::bounds::{self, SweepConfig};
use synthex::experience::TabularPerturbedModel;
use synthex::mdp;
use synthex::replay::{self, Transition};
use synthex::rng::{rng_for, rng_from_seed, Stream};
use synthex::trainer::{self, TrainConfig};
use synthex::{curriculum, Error};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::Backend { .. } | Error::Numeric(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Finite MDP with bounded rewards.
#[pyclass(name = "TabularMdp", module = "synthex_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyMdp(mdp::TabularMdp);

#[pymethods]
impl PyMdp {
    #[new]
    #[pyo3(signature = (kernel, rewards, gamma, rho0, r_max=1.0))]
    fn new(kernel: Vec<Vec<Vec<f64>>>, rewards: Vec<Vec<f64>>, gamma: f64, rho0: Vec<f64>, r_max: f64) -> PyResult<Self> {
        mdp::TabularMdp::new(kernel, rewards, gamma, rho0, r_max).map(Self).map_err(py_err)
    }

    #[staticmethod]
    #[pyo3(signature = (n_states, n_actions, gamma, seed, r_max=1.0))]
    fn random(n_states: usize, n_actions: usize, gamma: f64, seed: u64, r_max: f64) -> PyResult<Self> {
        let mut rng = rng_for(seed, Stream::Model, &[]);
        mdp::TabularMdp::random(n_states, n_actions, gamma, r_max, &mut rng).map(Self).map_err(py_err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        mdp::TabularMdp::from_json_str(text).map(Self).map_err(py_err)
    }

    fn to_json(&self) -> String {
        self.0.to_json_string()
    }

    #[getter]
    fn n_states(&self) -> usize {
        self.0.n_states()
    }

    #[getter]
    fn n_actions(&self) -> usize {
        self.0.n_actions()
    }

    #[getter]
    fn gamma(&self) -> f64 {
        self.0.gamma()
    }

    #[getter]
    fn kernel(&self) -> Vec<Vec<Vec<f64>>> {
        self.0.kernel().to_vec()
    }

    #[getter]
    fn rewards(&self) -> Vec<Vec<f64>> {
        self.0.rewards().to_vec()
    }

    fn __repr__(&self) -> String {
        format!("TabularMdp(n_states={}, n_actions={}, gamma={})", self.0.n_states(), self.0.n_actions(), self.0.gamma())
    }
}

/// Softmax policy over a logit table.
#[pyclass(name = "TabularPolicy", module = "synthex_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyPolicy(mdp::TabularPolicy);

#[pymethods]
impl PyPolicy {
    #[new]
    fn new(logits: Vec<Vec<f64>>) -> PyResult<Self> {
        mdp::TabularPolicy::new(logits).map(Self).map_err(py_err)
    }

    #[staticmethod]
    fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self(mdp::TabularPolicy::uniform(n_states, n_actions))
    }

    #[staticmethod]
    #[pyo3(signature = (n_states, n_actions, seed, scale=1.0))]
    fn random(n_states: usize, n_actions: usize, seed: u64, scale: f64) -> Self {
        let mut rng = rng_for(seed, Stream::Policy, &[]);
        Self(mdp::TabularPolicy::random(n_states, n_actions, scale, &mut rng))
    }

    #[getter]
    fn logits(&self) -> Vec<Vec<f64>> {
        self.0.logits().to_vec()
    }

    fn probs(&self, state: usize) -> PyResult<Vec<f64>> {
        if state >= self.0.n_states() {
            return Err(PyValueError::new_err(format!("state {state} out of range")));
        }
        Ok(self.0.probs(state))
    }
}

/// A perturbed copy of a base MDP with target transition and reward errors.
#[pyclass(name = "PerturbedModel", module = "synthex_py", frozen, skip_from_py_object)]
struct PyModel(TabularPerturbedModel);

#[pymethods]
impl PyModel {
    #[new]
    fn new(base: &PyMdp, eps_p: f64, eps_r: f64, seed: u64) -> PyResult<Self> {
        let mut rng = rng_for(seed, Stream::Model, &[1]);
        TabularPerturbedModel::new(base.0.clone(), eps_p, eps_r, &mut rng).map(Self).map_err(py_err)
    }

    #[getter]
    fn perturbed(&self) -> PyMdp {
        PyMdp(self.0.perturbed().clone())
    }

    /// Measured `{"eps_r": .., "eps_p": ..}` against `real`.
    fn error(&self, py: Python<'_>, real: &PyMdp) -> PyResult<Py<PyAny>> {
        to_py(py, &synthex::experience::measure_model_error(&real.0, &self.0).map_err(py_err)?)
    }
}

/// Exact `v`, `q`, `advantage`, `j` and normalized `occupancy`.
#[pyfunction]
fn evaluate_policy(py: Python<'_>, mdp: &PyMdp, policy: &PyPolicy) -> PyResult<Py<PyAny>> {
    to_py(py, &mdp::evaluate_policy(&mdp.0, &policy.0).map_err(py_err)?)
}

/// `max_s KL(q(.|s) || p(.|s))`.
#[pyfunction]
fn kl_radius(p: &PyPolicy, q: &PyPolicy) -> PyResult<f64> {
    mdp::kl_radius(&p.0, &q.0).map_err(py_err)
}

#[pyfunction]
fn delta_model(eps_r: f64, eps_p: f64, gamma: f64, r_max: f64) -> PyResult<f64> {
    bounds::delta_model(eps_r, eps_p, gamma, r_max).map_err(py_err)
}

#[pyfunction]
fn verify_simulation_lemma(py: Python<'_>, real: &PyMdp, model: &PyModel, policy: &PyPolicy) -> PyResult<Py<PyAny>> {
    to_py(py, &bounds::verify_simulation_lemma(&real.0, &model.0, &policy.0).map_err(py_err)?)
}

#[pyfunction]
fn verify_policy_improvement(
    py: Python<'_>,
    real: &PyMdp,
    model: &PyModel,
    pi: &PyPolicy,
    pi_prime: &PyPolicy,
) -> PyResult<Py<PyAny>> {
    to_py(py, &bounds::verify_policy_improvement(&real.0, &model.0, &pi.0, &pi_prime.0).map_err(py_err)?)
}

/// Runs a bound sweep; `config` is a dict with the `verify-bounds` config
/// keys (missing keys take their defaults). Returns `(reports, summary)`.
#[pyfunction]
#[pyo3(signature = (config=None))]
fn run_sweep(py: Python<'_>, config: Option<&Bound<'_, PyAny>>) -> PyResult<(Py<PyAny>, Py<PyAny>)> {
    let cfg: SweepConfig = match config {
        Some(c) => from_py(c)?,
        None => SweepConfig::default(),
    };
    let reports = bounds::run_sweep(&cfg).map_err(py_err)?;
    let summary = bounds::summarize(cfg.kind, &reports);
    Ok((to_py(py, &reports)?, to_py(py, &summary)?))
}

#[pyfunction]
fn gae_advantages(rewards: Vec<f64>, values: Vec<f64>, gamma: f64, lam: f64) -> PyResult<Vec<f64>> {
    trainer::gae_advantages(&rewards, &values, gamma, lam).map_err(py_err)
}

#[pyfunction]
fn grpo_advantages(rewards: Vec<f64>) -> PyResult<Vec<f64>> {
    trainer::grpo_advantages(&rewards).map_err(py_err)
}

/// Population variance of a task's group rewards.
#[pyfunction]
fn task_value(rewards: Vec<f64>) -> PyResult<f64> {
    curriculum::task_value(&rewards).map_err(py_err)
}

#[pyfunction]
fn mix_tasks(original: Vec<String>, synthetic: Vec<String>, lam: f64, batch: usize, seed: u64) -> PyResult<Vec<String>> {
    curriculum::mix_tasks(&original, &synthetic, lam, batch, &mut rng_from_seed(seed)).map_err(py_err)
}

/// Bounded FIFO of transitions with similarity retrieval.
#[pyclass(name = "ReplayBuffer", module = "synthex_py")]
struct PyReplayBuffer(replay::ReplayBuffer);

#[pymethods]
impl PyReplayBuffer {
    #[new]
    fn new(capacity: usize) -> Self {
        Self(replay::ReplayBuffer::new(capacity))
    }

    /// Appends a transition dict (`task`, `state`, `action`, `next_state`,
    /// `reward`, `reasoning`, `done`, `episode`).
    fn append(&mut self, transition: &Bound<'_, PyAny>) -> PyResult<()> {
        let t: Transition = from_py(transition)?;
        self.0.append(t);
        Ok(())
    }

    /// Top-`k` transitions by cosine similarity to `(state, action)`.
    fn retrieve(&self, py: Python<'_>, state: &str, action: &str, k: usize) -> PyResult<Py<PyAny>> {
        to_py(py, &self.0.retrieve_topk(state, action, k))
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

/// Policy-gradient trainer on an experience model.
#[pyclass(name = "Trainer", module = "synthex_py", unsendable)]
struct PyTrainer(trainer::Trainer);

#[pymethods]
impl PyTrainer {
    /// `config` is a dict with the `train` config keys.
    #[new]
    #[pyo3(signature = (config=None))]
    fn new(config: Option<&Bound<'_, PyAny>>) -> PyResult<Self> {
        let cfg: TrainConfig = match config {
            Some(c) => from_py(c)?,
            None => TrainConfig::default(),
        };
        trainer::Trainer::new(cfg).map(Self).map_err(py_err)
    }

    #[staticmethod]
    fn from_toml(path: PathBuf) -> PyResult<Self> {
        let cfg: TrainConfig = synthex::cli::load_config(&path).map_err(py_err)?;
        trainer::Trainer::new(cfg).map(Self).map_err(py_err)
    }

    /// One training iteration; returns its metrics dict.
    fn step(&mut self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let (m, _) = self.0.step().map_err(py_err)?;
        to_py(py, &m)
    }

    fn evaluate(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.0.evaluate().map_err(py_err)?)
    }

    /// Full run writing artifacts to `out_dir`; returns the report dict.
    fn run(&mut self, py: Python<'_>, out_dir: PathBuf) -> PyResult<Py<PyAny>> {
        to_py(py, &self.0.run(&out_dir).map_err(py_err)?)
    }

    #[getter]
    fn metrics(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.0.metrics())
    }
}

#[pymodule]
fn synthex_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMdp>()?;
    m.add_class::<PyPolicy>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyReplayBuffer>()?;
    m.add_class::<PyTrainer>()?;
    m.add_function(wrap_pyfunction!(evaluate_policy, m)?)?;
    m.add_function(wrap_pyfunction!(kl_radius, m)?)?;
    m.add_function(wrap_pyfunction!(delta_model, m)?)?;
    m.add_function(wrap_pyfunction!(verify_simulation_lemma, m)?)?;
    m.add_function(wrap_pyfunction!(verify_policy_improvement, m)?)?;
    m.add_function(wrap_pyfunction!(run_sweep, m)?)?;
    m.add_function(wrap_pyfunction!(gae_advantages, m)?)?;
    m.add_function(wrap_pyfunction!(grpo_advantages, m)?)?;
    m.add_function(wrap_pyfunction!(task_value, m)?)?;
    m.add_function(wrap_pyfunction!(mix_tasks, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
