use std::collections::BTreeMap;
use std::path::PathBuf;

use ::decoupled_dt as ddt;
use ddt::data::{self, Dataset as CoreDataset};
use ddt::envs::{self, Behavior, EnvKind};
use ddt::model::{self as core_model, Action, History, ModelConfig, Variant};
use ddt::train::{self, TrainConfig};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: ddt::Error) -> PyErr {
    match e {
        ddt::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn parse<T: std::str::FromStr<Err = ddt::Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(py_err)
}

/// Offline trajectories from one environment.
#[pyclass(module = "decoupled_dt_py")]
struct Dataset {
    inner: CoreDataset,
}

#[pymethods]
impl Dataset {
    /// Rolls out a scripted behavior: "random", "expert" or "mix:P".
    #[staticmethod]
    #[pyo3(signature = (env, behavior = "mix:0.5", episodes = None, seed = 0))]
    fn generate(env: &str, behavior: &str, episodes: Option<usize>, seed: u64) -> PyResult<Self> {
        let kind: EnvKind = parse(env)?;
        let b: Behavior = parse(behavior)?;
        let n = episodes.unwrap_or_else(|| train::desk_episodes(kind));
        Ok(Dataset { inner: envs::gen_dataset(kind, b, n, seed).map_err(py_err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let trajs = data::read_dataset(&path).map_err(py_err)?;
        Ok(Dataset { inner: CoreDataset::new(trajs).map_err(py_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        data::write_dataset(&path, &self.inner.trajectories).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn env_id(&self) -> String {
        self.inner.env_id().to_string()
    }

    fn returns(&self) -> Vec<f64> {
        self.inner.trajectories.iter().map(|t| t.episode_return()).collect()
    }

    fn rewards(&self, episode: usize) -> PyResult<Vec<f64>> {
        self.inner.trajectories.get(episode).map(|t| t.rewards.clone()).ok_or_else(|| PyValueError::new_err("episode out of range"))
    }

    fn rtgs(&self, episode: usize) -> PyResult<Vec<f64>> {
        self.inner.trajectories.get(episode).map(|t| t.rtgs.clone()).ok_or_else(|| PyValueError::new_err("episode out of range"))
    }

    /// Fraction of trajectories whose returns-to-go rebuild from the rewards.
    fn decomposition_rate(&self) -> f64 {
        let ok = self.inner.trajectories.iter().filter(|t| data::verify_rtg_decomposition(t)).count();
        ok as f64 / self.inner.len() as f64
    }

    fn stats<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let s = self.inner.stats();
        let d = PyDict::new(py);
        d.set_item("episodes", s.episodes)?;
        d.set_item("steps", s.steps)?;
        d.set_item("return_mean", s.return_mean)?;
        d.set_item("return_min", s.return_min)?;
        d.set_item("return_max", s.return_max)?;
        d.set_item("suggested_rtg_scale", s.suggested_rtg_scale)?;
        Ok(d)
    }

    fn __repr__(&self) -> String {
        format!("Dataset(env={}, episodes={}, steps={})", self.inner.env_id(), self.inner.len(), self.inner.total_steps())
    }
}

/// A trained or freshly initialized policy.
#[pyclass(module = "decoupled_dt_py")]
struct Model {
    inner: core_model::Model<f32>,
    meta: BTreeMap<String, String>,
}

fn key_values(d: &Bound<'_, PyDict>) -> PyResult<BTreeMap<String, (usize, String)>> {
    let mut kv = BTreeMap::new();
    for (i, (k, v)) in d.iter().enumerate() {
        kv.insert(k.extract::<String>()?, (i + 1, v.str()?.to_string()));
    }
    Ok(kv)
}

fn desk_config(env: &str, variant: &str, overrides: Option<&Bound<'_, PyDict>>) -> PyResult<(EnvKind, ModelConfig, TrainConfig)> {
    let kind: EnvKind = parse(env)?;
    let v: Variant = parse(variant)?;
    let mut rc = ddt::cli::RunConfig::desk(kind, v);
    if let Some(o) = overrides {
        rc.apply(&key_values(o)?).map_err(py_err)?;
    }
    Ok((kind, rc.model, rc.train))
}

fn to_action(obj: &Bound<'_, PyAny>) -> PyResult<Action> {
    if let Ok(i) = obj.extract::<usize>() {
        return Ok(Action::Discrete(i));
    }
    Ok(Action::Continuous(obj.extract::<Vec<f64>>()?))
}

#[pymethods]
impl Model {
    /// Untrained desk-scale model. `config` holds key/value overrides such
    /// as `{"d_model": 32, "adaln_depth": 2}`.
    #[new]
    #[pyo3(signature = (env, variant, seed = 0, config = None))]
    fn new(env: &str, variant: &str, seed: u64, config: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let (kind, cfg, _) = desk_config(env, variant, config)?;
        let inner = core_model::Model::new(cfg, seed).map_err(py_err)?;
        Ok(Model { inner, meta: BTreeMap::from([("env_id".into(), kind.id().into())]) })
    }

    /// Behavior-clones a model; returns `(model, losses)`.
    #[staticmethod]
    #[pyo3(signature = (dataset, variant, seed = 0, steps = None, config = None))]
    fn train(
        py: Python<'_>,
        dataset: &Dataset,
        variant: &str,
        seed: u64,
        steps: Option<usize>,
        config: Option<&Bound<'_, PyDict>>,
    ) -> PyResult<(Self, Vec<f64>)> {
        let (kind, mut cfg, mut hyper) = desk_config(dataset.inner.env_id(), variant, None)?;
        let stats = dataset.inner.stats();
        cfg.rtg_scale = stats.suggested_rtg_scale;
        if let Some(o) = config {
            let mut rc = ddt::cli::RunConfig { model: cfg, train: hyper };
            rc.apply(&key_values(o)?).map_err(py_err)?;
            (cfg, hyper) = (rc.model, rc.train);
        }
        hyper.seed = seed;
        if let Some(s) = steps {
            hyper.steps = s;
        }
        let ds = &dataset.inner;
        let (inner, curve) = py.detach(|| train::train_run(ds, &cfg, &hyper)).map_err(py_err)?;
        let meta = BTreeMap::from([
            ("env_id".to_string(), kind.id().to_string()),
            ("dataset_max_return".to_string(), format!("{}", stats.return_max)),
            ("seed".to_string(), seed.to_string()),
        ]);
        Ok((Model { inner, meta }, curve.losses))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = core_model::load_checkpoint(&path).map_err(py_err)?;
        Ok(Model { inner: ck.to_model().map_err(py_err)?, meta: ck.meta })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        core_model::save_checkpoint(&path, &core_model::Checkpoint::from_model(&self.inner, self.meta.clone())).map_err(py_err)
    }

    #[getter]
    fn variant(&self) -> String {
        self.inner.config.variant.to_string()
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.params.num_scalars()
    }

    #[getter]
    fn meta(&self) -> BTreeMap<String, String> {
        self.meta.clone()
    }

    fn config(&self) -> Vec<(String, String)> {
        ddt::cli::RunConfig { model: self.inner.config.clone(), train: TrainConfig::default() }
            .entries()
            .into_iter()
            .filter(|(k, _)| !matches!(k.as_str(), "lr" | "batch_size" | "steps" | "grad_clip" | "warmup_steps"))
            .collect()
    }

    /// Raw head output (tanh actions or logits) for the current step.
    ///
    /// `obs` and `timesteps` end at the current step; `actions` and
    /// `past_rtgs` hold the preceding steps. Discrete actions are ints.
    #[pyo3(signature = (obs, actions, timesteps, rtg, past_rtgs = None))]
    fn predict(
        &self,
        obs: Vec<Vec<f64>>,
        actions: Vec<Bound<'_, PyAny>>,
        timesteps: Vec<usize>,
        rtg: f64,
        past_rtgs: Option<Vec<f64>>,
    ) -> PyResult<Vec<f32>> {
        let n = obs.len();
        let history = History {
            obs,
            actions: actions.iter().map(to_action).collect::<PyResult<_>>()?,
            past_rtgs: past_rtgs.unwrap_or_else(|| vec![rtg; n.saturating_sub(1)]),
            timesteps,
        };
        self.inner.predict_raw(&history, rtg).map_err(py_err)
    }

    /// Adaptive layer norm of `x` under scaled return `z` (decoupled variant).
    fn adaln(&self, x: Vec<f32>, z: f32) -> PyResult<Vec<f32>> {
        self.inner.adaln(&x, z).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        let c = &self.inner.config;
        format!("Model(variant={}, d_model={}, n_layers={}, k={})", c.variant, c.d_model, c.n_layers, c.context_length)
    }
}

fn target_or_meta(model: &Model, target_rtg: Option<f64>) -> PyResult<f64> {
    target_rtg
        .or_else(|| model.meta.get("dataset_max_return").and_then(|v| v.parse().ok()))
        .ok_or_else(|| PyValueError::new_err("target_rtg is required for untrained models"))
}

/// Conditioned evaluation; normalized scores use scripted references.
#[pyfunction]
#[pyo3(signature = (model, env, target_rtg = None, episodes = 100, seed = 0))]
fn rollout<'py>(py: Python<'py>, model: &Model, env: &str, target_rtg: Option<f64>, episodes: usize, seed: u64) -> PyResult<Bound<'py, PyDict>> {
    let kind: EnvKind = parse(env)?;
    let target = target_or_meta(model, target_rtg)?;
    let r = py.detach(|| ddt::eval::rollout(&model.inner, kind, target, episodes, seed)).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("returns", r.returns)?;
    d.set_item("mean", r.mean)?;
    d.set_item("std_error", r.std_error)?;
    d.set_item("normalized", r.normalized)?;
    d.set_item("normalized_std_error", r.normalized_std_error)?;
    d.set_item("target_rtg", r.target_rtg)?;
    d.set_item("seeds", r.seeds)?;
    Ok(d)
}

/// Attention averaged over full-window predictions; returns
/// `(layers, labels, diagonal_mass_r1)`.
#[pyfunction]
#[pyo3(signature = (model, env, steps = 1000, seed = 0, target_rtg = None))]
#[allow(clippy::type_complexity)]
fn attention(model: &Model, env: &str, steps: usize, seed: u64, target_rtg: Option<f64>) -> PyResult<(Vec<Vec<Vec<f64>>>, Vec<String>, f64)> {
    let kind: EnvKind = parse(env)?;
    let target = target_or_meta(model, target_rtg)?;
    let map = ddt::eval::attention_report(&model.inner, kind, steps, seed, target).map_err(py_err)?;
    Ok((map.layers.clone(), map.labels(), map.diagonal_mass(1)))
}

/// Allowed-attention matrix (row = query) for `k` timesteps.
#[pyfunction]
fn attention_mask(variant: &str, k: usize) -> PyResult<Vec<Vec<bool>>> {
    let m = core_model::build_attention_mask(parse(variant)?, k);
    Ok(m.allowed.chunks(m.size).map(<[bool]>::to_vec).collect())
}

#[pyfunction]
fn compute_rtgs(rewards: Vec<f64>) -> PyResult<Vec<f64>> {
    data::compute_rtgs(&rewards).map_err(py_err)
}

#[pyfunction]
fn normalized_score(raw: f64, random_ref: f64, expert_ref: f64) -> PyResult<f64> {
    ddt::eval::normalized_score(raw, random_ref, expert_ref).map_err(py_err)
}

/// `(random, expert)` mean returns of the scripted behaviors.
#[pyfunction]
fn reference_scores(env: &str) -> PyResult<(f64, f64)> {
    let r = envs::cached_reference_scores(parse(env)?).map_err(py_err)?;
    Ok((r.random, r.expert))
}

/// Finite-difference check on a tiny model; returns `(max_rel_error, passed)`.
#[pyfunction]
#[pyo3(signature = (variant, discrete = false, tolerance = 1e-4))]
fn grad_check(variant: &str, discrete: bool, tolerance: f64) -> PyResult<(f64, bool)> {
    let space = if discrete { core_model::ActionSpace::Discrete } else { core_model::ActionSpace::Continuous };
    let r = train::grad_check_model(&train::tiny_config(parse(variant)?, space), tolerance).map_err(py_err)?;
    Ok((r.max_rel_error, r.passed()))
}

/// Inference cost per variant; one `(variant, k, tokens, element_ratio,
/// median_secs)` tuple per row.
#[pyfunction]
#[pyo3(signature = (k = vec![10, 20, 30], trials = 10, seed = 0))]
fn bench_inference(py: Python<'_>, k: Vec<usize>, trials: usize, seed: u64) -> PyResult<Vec<(String, usize, usize, f64, f64)>> {
    let base = ModelConfig::new(Variant::Dt, EnvKind::Reacher.obs_dim(), EnvKind::Reacher.action_dim(), core_model::ActionSpace::Continuous);
    let t = py.detach(|| ddt::eval::bench_inference(&base, &k, trials, seed)).map_err(py_err)?;
    Ok(t.rows.into_iter().map(|r| (r.variant.to_string(), r.k, r.tokens, r.element_ratio, r.median_secs)).collect())
}

#[pymodule]
fn decoupled_dt_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(rollout, m)?)?;
    m.add_function(wrap_pyfunction!(attention, m)?)?;
    m.add_function(wrap_pyfunction!(attention_mask, m)?)?;
    m.add_function(wrap_pyfunction!(compute_rtgs, m)?)?;
    m.add_function(wrap_pyfunction!(normalized_score, m)?)?;
    m.add_function(wrap_pyfunction!(reference_scores, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    m.add_function(wrap_pyfunction!(bench_inference, m)?)?;
    Ok(())
}
