//! Python bindings: scenarios, the environment, the K-Means baseline,
//! training, trained policies and the experiment commands.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use ::tagmappo::baselines::kmeans_policy;
use ::tagmappo::channel::free_space_path_loss as fspl;
use ::tagmappo::env::{Env as CoreEnv, Observation, HOVER_ACTION, NUM_ACTIONS};
use ::tagmappo::harness::{self, ExperimentSpec, HarnessError};
use ::tagmappo::metrics::{jain_index as jain, MetricsRow};
use ::tagmappo::nn::Actor;
use ::tagmappo::power::propulsion_power as p_fly;
use ::tagmappo::rng::{stream_rng, SimRng, Stream};
use ::tagmappo::train::{self as core_train, Controller, TrainConfig, Trainer as CoreTrainer};
use ::tagmappo::world::{make_scenario, ScenarioConfig};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn harness_err(e: HarnessError) -> PyErr {
    match e {
        HarnessError::Config(_) => value_err(e),
        HarnessError::Runtime(_) => runtime_err(e),
    }
}

fn json_to_py<'py>(py: Python<'py>, v: &serde_json::Value) -> PyResult<Bound<'py, PyAny>> {
    use serde_json::Value;
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any(),
        Value::Number(n) => match (n.as_u64(), n.as_i64()) {
            (Some(u), _) => u.into_pyobject(py)?.into_any(),
            (None, Some(i)) => i.into_pyobject(py)?.into_any(),
            _ => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any(),
        Value::Array(xs) => {
            let list = PyList::empty(py);
            for x in xs {
                list.append(json_to_py(py, x)?)?;
            }
            list.into_any()
        }
        Value::Object(map) => {
            let d = PyDict::new(py);
            for (k, x) in map {
                d.set_item(k, json_to_py(py, x)?)?;
            }
            d.into_any()
        }
    })
}

fn to_py<'py, T: serde::Serialize>(py: Python<'py>, x: &T) -> PyResult<Bound<'py, PyAny>> {
    json_to_py(py, &serde_json::to_value(x).map_err(runtime_err)?)
}

fn parse_table(text: Option<&str>) -> PyResult<toml::Table> {
    text.map_or(Ok(toml::Table::new()), |t| t.parse().map_err(value_err))
}

fn obs_list(obs: &[Option<Observation>]) -> Vec<Option<Vec<f64>>> {
    obs.iter().map(|o| o.as_ref().map(Observation::to_vec)).collect()
}

/// A resolved scenario configuration.
#[pyclass(module = "tagmappo", from_py_object)]
#[derive(Clone)]
struct Scenario {
    inner: ScenarioConfig,
}

#[pymethods]
impl Scenario {
    /// `name` is crowded_urban, suburban or rural; `overrides` is a TOML snippet.
    #[new]
    #[pyo3(signature = (name, overrides=None))]
    fn new(name: &str, overrides: Option<&str>) -> PyResult<Self> {
        let inner = make_scenario(name, &parse_table(overrides)?).map_err(value_err)?;
        Ok(Scenario { inner })
    }

    #[getter]
    fn num_uavs(&self) -> usize {
        self.inner.num_uavs
    }

    #[getter]
    fn num_users(&self) -> usize {
        self.inner.num_users
    }

    #[getter]
    fn episode_len(&self) -> usize {
        self.inner.episode_len
    }

    fn model_hash(&self) -> String {
        self.inner.model_hash()
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml_string().map_err(runtime_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Scenario(num_uavs={}, num_users={}, episode_len={})",
            self.inner.num_uavs, self.inner.num_users, self.inner.episode_len
        )
    }
}

/// One network instance. Actions are per-UAV integers in [0, 27) or None for dead UAVs.
#[pyclass(module = "tagmappo")]
struct Env {
    inner: CoreEnv,
}

#[pymethods]
impl Env {
    #[new]
    fn new(scenario: &Scenario, seed: u64) -> PyResult<Self> {
        let (inner, _) = CoreEnv::reset(&scenario.inner, seed).map_err(value_err)?;
        Ok(Env { inner })
    }

    #[getter]
    fn t(&self) -> usize {
        self.inner.t()
    }

    #[getter]
    fn done(&self) -> bool {
        self.inner.is_done()
    }

    #[getter]
    fn alive(&self) -> Vec<bool> {
        self.inner.state().alive.clone()
    }

    fn uav_positions(&self) -> Vec<[f64; 3]> {
        self.inner.state().uav_pos.iter().map(|p| [p.x, p.y, p.z]).collect()
    }

    fn user_positions(&self) -> Vec<[f64; 2]> {
        self.inner.state().user_pos.iter().map(|p| [p.x, p.y]).collect()
    }

    fn observations(&self) -> Vec<Option<Vec<f64>>> {
        obs_list(&self.inner.observations())
    }

    fn metrics<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let row = MetricsRow::new(self.inner.t(), self.inner.metrics(), self.inner.state().alive_count());
        to_py(py, &row)
    }

    /// Advances one step; returns (observations, reward, metrics, done).
    fn step<'py>(
        &mut self,
        py: Python<'py>,
        actions: Vec<Option<usize>>,
    ) -> PyResult<(Vec<Option<Vec<f64>>>, f64, Bound<'py, PyAny>, bool)> {
        let out = self.inner.step(&actions).map_err(value_err)?;
        let row = MetricsRow::new(self.inner.t(), &out.metrics, self.inner.state().alive_count());
        Ok((obs_list(&out.observations), out.reward, to_py(py, &row)?, out.done))
    }

    /// Actions of the K-Means placement controller for the current state.
    #[pyo3(signature = (seed=0))]
    fn kmeans_actions(&self, seed: u64) -> Vec<Option<usize>> {
        kmeans_policy(self.inner.state(), self.inner.config(), seed)
    }
}

/// A trained actor loaded from a checkpoint.
#[pyclass(module = "tagmappo")]
struct Policy {
    actor: Actor,
    rng: SimRng,
}

#[pymethods]
impl Policy {
    #[staticmethod]
    #[pyo3(signature = (path, scenario, controller="tag_mappo", seed=0))]
    fn load(path: PathBuf, scenario: &Scenario, controller: &str, seed: u64) -> PyResult<Self> {
        let controller: Controller = controller.parse().map_err(value_err)?;
        let (actor, _) = core_train::load_policy(&path, &scenario.inner, controller).map_err(value_err)?;
        Ok(Policy {
            actor,
            rng: stream_rng(seed, Stream::Policy),
        })
    }

    fn probs(&self, obs: Vec<f64>) -> PyResult<Vec<f64>> {
        self.actor.probs(&obs).map_err(value_err)
    }

    #[pyo3(signature = (obs, greedy=false))]
    fn act(&mut self, obs: Vec<Option<Vec<f64>>>, greedy: bool) -> PyResult<Vec<Option<usize>>> {
        obs.iter()
            .map(|o| match o {
                None => Ok(None),
                Some(x) if greedy => self.actor.greedy(x).map(Some).map_err(value_err),
                Some(x) => self.actor.sample(x, &mut self.rng).map(|(a, _)| Some(a)).map_err(value_err),
            })
            .collect()
    }
}

/// MAPPO trainer (TAG-MAPPO or the MLP-critic baseline).
#[pyclass(module = "tagmappo")]
struct Trainer {
    inner: CoreTrainer,
}

#[pymethods]
impl Trainer {
    /// `config` is a TOML snippet of training settings.
    #[new]
    #[pyo3(signature = (scenario, config=None, controller="tag_mappo"))]
    fn new(scenario: &Scenario, config: Option<&str>, controller: &str) -> PyResult<Self> {
        let cfg: TrainConfig = toml::Value::Table(parse_table(config)?).try_into().map_err(value_err)?;
        let controller: Controller = controller.parse().map_err(value_err)?;
        let inner = CoreTrainer::new(&scenario.inner, &cfg, controller).map_err(value_err)?;
        Ok(Trainer { inner })
    }

    #[getter]
    fn episode(&self) -> usize {
        self.inner.episode()
    }

    /// Runs one episode of collection and PPO updates; returns its log row.
    fn train_episode<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let log = self.inner.train_episode().map_err(runtime_err)?;
        to_py(py, &log)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(runtime_err)
    }
}

fn load_spec(config: PathBuf, sets: Vec<String>) -> PyResult<ExperimentSpec> {
    ExperimentSpec::load(&config, &sets).map_err(harness_err)
}

/// Trains every seed of an experiment file; returns the output directory.
#[pyfunction]
#[pyo3(signature = (config, sets=Vec::new()))]
fn train(config: PathBuf, sets: Vec<String>) -> PyResult<PathBuf> {
    let spec = load_spec(config, sets)?;
    harness::cmd_train(&spec).map_err(harness_err)?;
    Ok(spec.output_dir)
}

#[pyfunction]
#[pyo3(signature = (config, sets=Vec::new()))]
fn evaluate(config: PathBuf, sets: Vec<String>) -> PyResult<PathBuf> {
    let spec = load_spec(config, sets)?;
    harness::cmd_eval(&spec).map_err(harness_err)?;
    Ok(spec.output_dir.join("eval"))
}

/// Paired failure/nominal evaluation; returns the recovery rows.
#[pyfunction]
#[pyo3(signature = (config, sets=Vec::new()))]
fn failure_eval<'py>(py: Python<'py>, config: PathBuf, sets: Vec<String>) -> PyResult<Bound<'py, PyAny>> {
    let spec = load_spec(config, sets)?;
    let out = harness::cmd_failure_eval(&spec).map_err(harness_err)?;
    to_py(py, &out.recovery)
}

#[pyfunction]
fn plot(csvs: Vec<PathBuf>, out: PathBuf) -> PyResult<Vec<PathBuf>> {
    harness::cmd_plot(&csvs, &out).map_err(harness_err)
}

#[pyfunction]
fn jain_index(values: Vec<f64>) -> PyResult<f64> {
    jain(&values, 0.0).map_err(value_err)
}

#[pyfunction]
fn free_space_path_loss(distance_m: f64, carrier_hz: f64) -> f64 {
    fspl(distance_m, carrier_hz)
}

#[pyfunction]
fn propulsion_power(speed: f64, scenario: &Scenario) -> PyResult<f64> {
    p_fly(speed, &scenario.inner.rotorcraft).map_err(value_err)
}

/// Returns (advantages, returns).
#[pyfunction]
fn compute_gae(rewards: Vec<f64>, values: Vec<f64>, bootstrap: f64, gamma: f64, tau: f64) -> PyResult<(Vec<f64>, Vec<f64>)> {
    if rewards.len() != values.len() {
        return Err(PyValueError::new_err("rewards and values differ in length"));
    }
    Ok(core_train::compute_gae(&rewards, &values, bootstrap, gamma, tau))
}

#[pymodule]
fn tagmappo(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("NUM_ACTIONS", NUM_ACTIONS)?;
    m.add("HOVER_ACTION", HOVER_ACTION)?;
    m.add_class::<Scenario>()?;
    m.add_class::<Env>()?;
    m.add_class::<Policy>()?;
    m.add_class::<Trainer>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(failure_eval, m)?)?;
    m.add_function(wrap_pyfunction!(plot, m)?)?;
    m.add_function(wrap_pyfunction!(jain_index, m)?)?;
    m.add_function(wrap_pyfunction!(free_space_path_loss, m)?)?;
    m.add_function(wrap_pyfunction!(propulsion_power, m)?)?;
    m.add_function(wrap_pyfunction!(compute_gae, m)?)?;
    Ok(())
}
