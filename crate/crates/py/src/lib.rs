//! Python bindings for the workbench core: shields, the lava gridworld,
//! the shielded PPO agent, and the experiment runner.
//!
//! Everything here is a thin wrapper. Episode drivers mirror the harness
//! loop exactly (act, step, record, flush at episode boundaries), so runs
//! driven from Python and runs driven by the CLI see the same semantics.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict, PyList};

use shieldbench::harness::{self, EnvConfig, LayoutName, RunArtifact, ScheduleSpec};
use shieldbench::lavagrid::{self, LavaGridEnv};
use shieldbench::pomdp::{ActionId, Environment, Observation, StateKey, Transition};
use shieldbench::ppo::{PpoConfig, ShieldedAgent, StepOutcome};
use shieldbench::shield as sh;
use shieldbench::shield::ShieldHandle;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn shield_key(state: &[u8], action: u8) -> sh::ShieldKey {
    sh::ShieldKey::new(StateKey::from_bytes(state.to_vec()), ActionId(action))
}

fn obs_to_dict(py: Python<'_>, obs: &Observation) -> PyResult<Py<PyDict>> {
    let d = PyDict::new_bound(py);
    let window: Vec<Vec<u8>> = obs.window.iter().map(|row| row.to_vec()).collect();
    d.set_item("window", window)?;
    d.set_item("goal_delta", obs.goal_delta)?;
    d.set_item("instance", obs.instance.index)?;
    d.set_item("instance_count", obs.instance.len)?;
    Ok(d.into())
}

fn transition_to_dict(py: Python<'_>, t: &Transition) -> PyResult<Py<PyDict>> {
    let d = PyDict::new_bound(py);
    d.set_item("obs", obs_to_dict(py, &t.obs)?)?;
    d.set_item("reward", t.reward)?;
    d.set_item("terminal", t.terminal)?;
    d.set_item("catastrophic", t.label.is_catastrophic())?;
    Ok(d.into())
}

/// One shield of any variant. Keys are (state bytes, action index) pairs;
/// `query` returns True when the pair is believed safe.
#[pyclass(name = "Shield")]
#[derive(Clone)]
struct PyShield {
    inner: sh::Shield,
}

#[pymethods]
impl PyShield {
    /// Exact table. Never forgets, never blocks an unseen pair.
    #[staticmethod]
    fn tabular() -> Self {
        PyShield {
            inner: sh::Shield::Tabular(sh::TabularShield::new()),
        }
    }

    /// Exact table of bounded size with least-recently-touched eviction.
    #[staticmethod]
    fn bounded(capacity: usize) -> PyResult<Self> {
        if capacity == 0 {
            return Err(PyValueError::new_err("capacity must be at least 1"));
        }
        Ok(PyShield {
            inner: sh::Shield::Bounded(sh::BoundedShield::new(capacity)),
        })
    }

    /// Bloom filter sized for `expected_n` records at `target_fp`. Zero
    /// false negatives; a false positive only ever over-blocks.
    #[staticmethod]
    fn bloom(expected_n: u64, target_fp: f64) -> PyResult<Self> {
        if expected_n == 0 {
            return Err(PyValueError::new_err("expected_n must be at least 1"));
        }
        if !(target_fp > 0.0 && target_fp < 1.0) {
            return Err(PyValueError::new_err("target_fp must lie in (0, 1)"));
        }
        Ok(PyShield {
            inner: sh::Shield::Bloom(sh::BloomShield::with_expected(expected_n, target_fp)),
        })
    }

    #[staticmethod]
    fn deserialize(bytes: &[u8]) -> PyResult<Self> {
        Ok(PyShield {
            inner: sh::Shield::deserialize(bytes).map_err(value_err)?,
        })
    }

    fn serialize<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new_bound(py, &self.inner.serialize())
    }

    /// True means safe: the pair is not (believed) recorded.
    fn query(&mut self, state: &[u8], action: u8) -> bool {
        self.inner.query(&shield_key(state, action))
    }

    fn record(&mut self, state: &[u8], action: u8) -> PyResult<()> {
        if let sh::Shield::Tabular(t) = &self.inner {
            if let Some(w) = t.key_width() {
                if w != state.len() + 1 {
                    return Err(PyValueError::new_err(format!(
                        "key width {} does not match this shield's width {}",
                        state.len() + 1,
                        w
                    )));
                }
            }
        }
        self.inner.record(shield_key(state, action));
        Ok(())
    }

    /// Set union of two exact tables. Other variants do not merge.
    fn merge(&mut self, other: &PyShield) -> PyResult<()> {
        match (&mut self.inner, &other.inner) {
            (sh::Shield::Tabular(a), sh::Shield::Tabular(b)) => a.merge(b).map_err(value_err),
            (a, b) => Err(PyValueError::new_err(format!(
                "merge needs two tabular shields, got {} and {}",
                a.variant_name(),
                b.variant_name()
            ))),
        }
    }

    fn variant(&self) -> &'static str {
        self.inner.variant_name()
    }

    fn __len__(&self) -> usize {
        self.inner.logical_len()
    }

    /// Total records ever accepted (tabular only).
    fn records_seen(&self) -> Option<u64> {
        match &self.inner {
            sh::Shield::Tabular(t) => Some(t.records_seen()),
            _ => None,
        }
    }

    fn capacity(&self) -> Option<usize> {
        match &self.inner {
            sh::Shield::Bounded(b) => Some(b.capacity()),
            _ => None,
        }
    }

    fn inserted(&self) -> Option<u64> {
        match &self.inner {
            sh::Shield::Bloom(b) => Some(b.inserted()),
            _ => None,
        }
    }

    fn __repr__(&self) -> String {
        format!(
            "Shield({}, {} entries)",
            self.inner.variant_name(),
            self.inner.logical_len()
        )
    }
}

/// Partially observable lava gridworld. Observations are an egocentric 5x5
/// window that never shows lava, a world-frame goal offset, and the identity
/// of the instance cluster the episode was drawn from.
#[pyclass(name = "LavaGrid")]
struct PyLavaGrid {
    env: LavaGridEnv,
}

#[pymethods]
impl PyLavaGrid {
    /// `layout` is "tiny", "desk", or "full". Give `flat_p` for a uniform
    /// per-tile lava probability or `growth` for the distance-growing
    /// schedule calibrated to the standard lava-free mass; at most one.
    #[new]
    #[pyo3(signature = (layout="desk", flat_p=None, growth=None, goal_count=1, shaping_sign=-1.0))]
    fn new(
        layout: &str,
        flat_p: Option<f64>,
        growth: Option<f64>,
        goal_count: usize,
        shaping_sign: f64,
    ) -> PyResult<Self> {
        let layout = match layout {
            "tiny" => LayoutName::Tiny,
            "desk" => LayoutName::Desk,
            "full" => LayoutName::Full,
            other => {
                return Err(PyValueError::new_err(format!(
                    "unknown layout `{other}` (expected tiny, desk, or full)"
                )))
            }
        };
        let schedule = match (flat_p, growth) {
            (Some(_), Some(_)) => {
                return Err(PyValueError::new_err(
                    "give flat_p or growth, not both",
                ))
            }
            (Some(p), None) => ScheduleSpec::Flat { p },
            (None, g) => ScheduleSpec::Calibrated {
                growth: g.unwrap_or(2.0),
            },
        };
        if shaping_sign != 1.0 && shaping_sign != -1.0 {
            return Err(PyValueError::new_err("shaping_sign must be 1.0 or -1.0"));
        }
        let cfg = EnvConfig {
            layout,
            schedule,
            shaping_sign,
            goal_count,
        };
        Ok(PyLavaGrid {
            env: cfg.build_env().map_err(value_err)?,
        })
    }

    /// Starts a fresh episode; same seed, same episode.
    fn reset(&mut self, py: Python<'_>, seed: u64) -> PyResult<Py<PyDict>> {
        let obs = self.env.reset(seed);
        obs_to_dict(py, &obs)
    }

    /// Returns {"obs", "reward", "terminal", "catastrophic"}.
    fn step(&mut self, py: Python<'_>, action: u8) -> PyResult<Py<PyDict>> {
        let t = self.env.step(ActionId(action)).map_err(value_err)?;
        transition_to_dict(py, &t)
    }

    /// Canonical byte key of the current state.
    fn state_key<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new_bound(py, self.env.state_key().as_bytes())
    }

    /// Teleports the agent mid-episode; lava layout and goal stay put.
    fn set_state(&mut self, x: u16, y: u16, facing: u8) -> PyResult<()> {
        self.env.set_state(x, y, facing).map_err(value_err)
    }

    /// Every reachable (state key, action) pair that steps into lava under
    /// the current episode's configuration.
    fn catastrophic_set(&self, py: Python<'_>) -> PyResult<Vec<(Py<PyBytes>, u8)>> {
        let pairs = self.env.catastrophic_set().map_err(runtime_err)?;
        Ok(pairs
            .into_iter()
            .map(|(k, a)| (PyBytes::new_bound(py, k.as_bytes()).into(), a.0))
            .collect())
    }

    fn action_count(&self) -> usize {
        self.env.spec().action_count
    }

    fn feature_len(&self) -> usize {
        self.env.spec().obs.feature_len()
    }

    fn goal_count(&self) -> usize {
        self.env.goal_count()
    }

    fn active_goal(&self) -> usize {
        self.env.active_goal()
    }

    fn position(&self) -> (u16, u16) {
        self.env.position()
    }

    fn facing(&self) -> u8 {
        self.env.facing()
    }

    fn cluster_count(&self) -> usize {
        self.env.dist().cluster_count()
    }

    fn width(&self) -> u16 {
        self.env.layout().width()
    }

    fn height(&self) -> u16 {
        self.env.layout().height()
    }

    fn __repr__(&self) -> String {
        format!(
            "LavaGrid({}x{}, {} goals, {} clusters)",
            self.env.layout().width(),
            self.env.layout().height(),
            self.env.goal_count(),
            self.env.dist().cluster_count()
        )
    }
}

/// PPO learner wired to an optional shield. With no shield this is the
/// plain baseline; mistakes are still counted so metrics stay comparable.
#[pyclass(name = "Agent")]
struct PyAgent {
    agent: ShieldedAgent,
}

#[pymethods]
impl PyAgent {
    #[new]
    #[pyo3(signature = (env, seed, shield=None, hidden=None, segment=None, lr=None,
                        gamma=None, lam=None, clip=None, epochs=None, minibatch=None,
                        entropy_coef=None, value_coef=None))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        env: &PyLavaGrid,
        seed: u64,
        shield: Option<&PyShield>,
        hidden: Option<usize>,
        segment: Option<usize>,
        lr: Option<f64>,
        gamma: Option<f64>,
        lam: Option<f64>,
        clip: Option<f64>,
        epochs: Option<usize>,
        minibatch: Option<usize>,
        entropy_coef: Option<f64>,
        value_coef: Option<f64>,
    ) -> PyResult<Self> {
        let mut cfg = PpoConfig::default();
        if let Some(v) = hidden {
            cfg.hidden = v;
        }
        if let Some(v) = segment {
            cfg.segment = v;
        }
        if let Some(v) = lr {
            cfg.lr = v;
        }
        if let Some(v) = gamma {
            cfg.gamma = v;
        }
        if let Some(v) = lam {
            cfg.lam = v;
        }
        if let Some(v) = clip {
            cfg.clip = v;
        }
        if let Some(v) = epochs {
            cfg.epochs = v;
        }
        if let Some(v) = minibatch {
            cfg.minibatch = v;
        }
        if let Some(v) = entropy_coef {
            cfg.entropy_coef = v;
        }
        if let Some(v) = value_coef {
            cfg.value_coef = v;
        }
        if cfg.hidden == 0 || cfg.segment == 0 || cfg.epochs == 0 || cfg.minibatch == 0 {
            return Err(PyValueError::new_err(
                "hidden, segment, epochs, and minibatch must be at least 1",
            ));
        }
        if !(cfg.lr > 0.0) {
            return Err(PyValueError::new_err("lr must be positive"));
        }
        let handle = match shield {
            None => ShieldHandle::None,
            Some(s) => ShieldHandle::Owned(s.inner.clone()),
        };
        Ok(PyAgent {
            agent: ShieldedAgent::new(
                env.env.spec().action_count,
                env.env.spec().obs.clone(),
                cfg,
                handle,
                seed,
            ),
        })
    }

    /// Runs one training episode and flushes the rollout buffer at the
    /// boundary if it has reached the segment length. Returns
    /// (return, steps, mistakes, reached_goal).
    fn train_episode(
        &mut self,
        env: &mut PyLavaGrid,
        episode_seed: u64,
        max_steps: usize,
    ) -> PyResult<(f64, u64, u64, bool)> {
        let mut obs = env.env.reset(episode_seed);
        self.agent.begin_episode();
        let mut ret = 0.0;
        let mut steps = 0u64;
        let mut mistakes = 0u64;
        let mut reached = false;
        for step in 0..max_steps {
            let key = env.env.state_key();
            let action = self.agent.act(&key, &obs).map_err(runtime_err)?;
            let t = env.env.step(action).map_err(runtime_err)?;
            ret += t.reward;
            steps += 1;
            let truncated = !t.terminal && step + 1 == max_steps;
            match self.agent.record_outcome(&t, truncated) {
                StepOutcome::Safe => {}
                StepOutcome::Mistake { .. } => mistakes += 1,
            }
            if t.terminal && t.reward > 0.0 {
                reached = true;
            }
            obs = t.obs;
            if t.terminal || truncated {
                break;
            }
        }
        if self.agent.ready_to_update() {
            self.agent.update(None).map_err(runtime_err)?;
        }
        Ok((ret, steps, mistakes, reached))
    }

    /// Deterministic evaluation rollout. Touches neither the rollout buffer
    /// nor the shield; safe to interleave with training. Returns
    /// (return, steps, reached_goal).
    fn greedy_episode(
        &mut self,
        env: &mut PyLavaGrid,
        episode_seed: u64,
        max_steps: usize,
    ) -> PyResult<(f64, u64, bool)> {
        let mut obs = env.env.reset(episode_seed);
        let mut ret = 0.0;
        let mut steps = 0u64;
        let mut reached = false;
        for _ in 0..max_steps {
            let key = env.env.state_key();
            let action = self.agent.act_greedy(&key, &obs).map_err(runtime_err)?;
            let t = env.env.step(action).map_err(runtime_err)?;
            ret += t.reward;
            steps += 1;
            if t.terminal && t.reward > 0.0 {
                reached = true;
            }
            obs = t.obs;
            if t.terminal {
                break;
            }
        }
        Ok((ret, steps, reached))
    }

    fn total_steps(&self) -> u64 {
        self.agent.total_steps()
    }

    fn total_mistakes(&self) -> u64 {
        self.agent.total_mistakes()
    }

    fn total_repeats(&self) -> u64 {
        self.agent.total_repeats()
    }

    fn buffered_steps(&self) -> usize {
        self.agent.buffered_steps()
    }

    /// Snapshot of the shield this agent carries, or None when unshielded.
    fn shield(&self) -> Option<PyShield> {
        match self.agent.shield() {
            ShieldHandle::None => None,
            ShieldHandle::Owned(s) => Some(PyShield { inner: s.clone() }),
            ShieldHandle::Shared(s) => Some(PyShield { inner: s.snapshot() }),
        }
    }

    fn __repr__(&self) -> String {
        format!(
            "Agent({} steps, {} mistakes, {} repeats)",
            self.agent.total_steps(),
            self.agent.total_mistakes(),
            self.agent.total_repeats()
        )
    }
}

/// Classic Bloom sizing: bit count and hash count for an expected insert
/// count at a target false-positive rate.
#[pyfunction]
fn bloom_dimensions(expected_n: u64, target_fp: f64) -> PyResult<(u64, u32)> {
    if expected_n == 0 {
        return Err(PyValueError::new_err("expected_n must be at least 1"));
    }
    if !(target_fp > 0.0 && target_fp < 1.0) {
        return Err(PyValueError::new_err("target_fp must lie in (0, 1)"));
    }
    Ok(sh::bloom_dimensions(expected_n, target_fp))
}

/// Masks blocked actions out of a probability vector and renormalizes.
/// Falls back to uniform-over-safe when the safe mass is zero, and to the
/// default policy when everything is blocked.
#[pyfunction]
fn apply_shield(probs: Vec<f64>, mask: Vec<bool>, default_policy: Vec<f64>) -> PyResult<Vec<f64>> {
    sh::apply_shield(&probs, &mask, &default_policy).map_err(value_err)
}

/// Exact number of distinct lava configurations over `n` eligible tiles.
#[pyfunction]
fn total_config_count(n: u32) -> PyResult<u128> {
    if n > 63 {
        return Err(PyValueError::new_err("n must be at most 63"));
    }
    Ok(lavagrid::total_config_count(n))
}

/// Sign-preserving log compression: sign(x) * log10(1 + |x|).
#[pyfunction]
fn symlog(x: f64) -> f64 {
    harness::symlog(x)
}

/// Fits the logistic scorer on labeled (state bytes, action) pairs.
/// Catastrophic keys are pushed toward score 0, safe keys toward 1.
#[pyfunction]
#[pyo3(signature = (catastrophic, safe, epochs=200, learning_rate=0.5))]
fn train_parametric(
    catastrophic: Vec<(Vec<u8>, u8)>,
    safe: Vec<(Vec<u8>, u8)>,
    epochs: usize,
    learning_rate: f64,
) -> PyResult<PyShield> {
    let to_keys = |pairs: Vec<(Vec<u8>, u8)>| -> Vec<sh::ShieldKey> {
        pairs
            .into_iter()
            .map(|(s, a)| sh::ShieldKey::new(StateKey::from_bytes(s), ActionId(a)))
            .collect()
    };
    let cat = to_keys(catastrophic);
    let safe = to_keys(safe);
    let trained = sh::train_parametric(&cat, &safe, epochs, learning_rate).map_err(value_err)?;
    Ok(PyShield {
        inner: sh::Shield::Parametric(trained),
    })
}

/// Runs a full experiment from config text in the CLI's format, plus
/// `key=value` overrides. Returns per-seed metrics and shields along with
/// the cross-seed aggregate.
#[pyfunction]
#[pyo3(signature = (config_text, overrides=Vec::new()))]
fn run_experiment(py: Python<'_>, config_text: &str, overrides: Vec<String>) -> PyResult<Py<PyDict>> {
    let cfg = shieldbench::cli::config::load(config_text, &overrides).map_err(value_err)?;
    cfg.validate().map_err(value_err)?;
    let artifacts = harness::run(&cfg).map_err(runtime_err)?;
    let refs: Vec<&RunArtifact> = artifacts.iter().collect();
    let summary = harness::aggregate(&refs).map_err(runtime_err)?;

    let out = PyDict::new_bound(py);
    out.set_item("protocol", cfg.protocol.as_str())?;
    out.set_item("seeds", cfg.seeds.clone())?;
    let runs = PyList::empty_bound(py);
    for a in &artifacts {
        let d = PyDict::new_bound(py);
        d.set_item("seed", a.run_seed)?;
        d.set_item("metrics_csv", a.metrics_csv())?;
        if !a.goal_evals.is_empty() {
            d.set_item("eval_csv", a.eval_csv())?;
        }
        let shields = PyList::empty_bound(py);
        for s in &a.shields {
            shields.append(PyBytes::new_bound(py, s))?;
        }
        d.set_item("shields", shields)?;
        d.set_item("total_steps", a.total_steps())?;
        d.set_item("total_mistakes", a.total_mistakes())?;
        d.set_item("total_repeats", a.total_repeats())?;
        runs.append(d)?;
    }
    out.set_item("runs", runs)?;
    out.set_item("aggregate_csv", summary.to_csv())?;
    out.set_item("degenerate_sample", summary.degenerate_sample)?;
    Ok(out.into())
}

#[pymodule]
fn shieldbench_py(_py: Python<'_>, m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyShield>()?;
    m.add_class::<PyLavaGrid>()?;
    m.add_class::<PyAgent>()?;
    m.add_function(wrap_pyfunction!(bloom_dimensions, m)?)?;
    m.add_function(wrap_pyfunction!(apply_shield, m)?)?;
    m.add_function(wrap_pyfunction!(total_config_count, m)?)?;
    m.add_function(wrap_pyfunction!(symlog, m)?)?;
    m.add_function(wrap_pyfunction!(train_parametric, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add("ACTION_TURN_LEFT", lavagrid::ACTION_TURN_LEFT.0)?;
    m.add("ACTION_TURN_RIGHT", lavagrid::ACTION_TURN_RIGHT.0)?;
    m.add("ACTION_FORWARD", lavagrid::ACTION_FORWARD.0)?;
    Ok(())
}
