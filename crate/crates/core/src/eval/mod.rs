//! Return-conditioned rollouts, normalized scores, attention maps and the
//! inference benchmark.

mod attention;
mod bench;

use std::fmt;

pub use attention::{attention_report, AttentionMap};
pub use bench::{bench_inference, BenchRow, BenchTable};

use crate::envs::{cached_reference_scores, episode_seed, Env, EnvKind, ReferenceScores};
use crate::error::{Error, Result};
use crate::model::{argmax, Action, ActionSpace, History, Model};
use crate::tensor::Scalar;

/// `100 · (raw − random) / (expert − random)`.
pub fn normalized_score(raw_mean: f64, random_ref: f64, expert_ref: f64) -> Result<f64> {
    let span = expert_ref - random_ref;
    if span == 0.0 || !span.is_finite() {
        return Err(Error::InvalidArgument(format!("degenerate reference scores: random {random_ref}, expert {expert_ref}")));
    }
    Ok(100.0 * (raw_mean - random_ref) / span)
}

/// Mean and standard error of the mean; a single sample has error 0.
pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub returns: Vec<f64>,
    pub mean: f64,
    pub std_error: f64,
    /// Present when reference scores are known.
    pub normalized: Option<f64>,
    pub normalized_std_error: Option<f64>,
    pub target_rtg: f64,
    pub episodes: usize,
    pub seeds: Vec<u64>,
}

impl EvalReport {
    pub fn key_values(&self) -> Vec<(&'static str, String)> {
        let opt = |v: Option<f64>| v.map_or_else(|| "na".to_string(), |v| format!("{v:.6}"));
        vec![
            ("episodes", self.episodes.to_string()),
            ("target_rtg", format!("{}", self.target_rtg)),
            ("return_mean", format!("{:.6}", self.mean)),
            ("return_se", format!("{:.6}", self.std_error)),
            ("normalized_score", opt(self.normalized)),
            ("normalized_se", opt(self.normalized_std_error)),
        ]
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kv = self.key_values();
        for (k, v) in &kv {
            writeln!(f, "{k:<18}{v:>14}")?;
        }
        writeln!(f)?;
        for (k, v) in &kv {
            writeln!(f, "{k}={v}")?;
        }
        Ok(())
    }
}

/// One conditioned episode.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeTrace {
    pub rewards: Vec<f64>,
    /// Return-to-go handed to the model before each action.
    pub presented_rtgs: Vec<f64>,
    pub actions: Vec<Action>,
}

impl EpisodeTrace {
    pub fn episode_return(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

pub(crate) fn check_env<S: Scalar, E: Env>(model: &Model<S>, env: &E) -> Result<()> {
    let c = &model.config;
    if env.obs_dim() != c.obs_dim || env.action_dim() != c.action_dim || env.action_space() != c.action_space {
        return Err(Error::EnvMismatch(format!(
            "environment has obs_dim {} / action_dim {} ({:?}), model expects {} / {} ({:?})",
            env.obs_dim(),
            env.action_dim(),
            env.action_space(),
            c.obs_dim,
            c.action_dim,
            c.action_space
        )));
    }
    Ok(())
}

/// Chooses the action for the current step; discrete actions are restricted
/// to legal moves when the environment reports them.
pub(crate) fn act<S: Scalar, E: Env>(model: &Model<S>, env: &E, history: &History, rtg: f64) -> Result<Action> {
    let raw = model.predict_raw(history, rtg)?;
    Ok(match model.config.action_space {
        ActionSpace::Continuous => Action::Continuous(raw.iter().map(|v| v.to_f64_lossy()).collect()),
        ActionSpace::Discrete => {
            let legal = env.legal_actions();
            let pick = argmax(&raw, |i| legal.as_ref().is_none_or(|l| l[i])).or_else(|| argmax(&raw, |_| true));
            Action::Discrete(pick.expect("non-empty logits"))
        }
    })
}

/// Runs one episode, subtracting each received reward from the
/// conditioning return-to-go. Calls `observe` before every prediction with
/// the current history and return-to-go.
pub(crate) fn run_episode_with<S: Scalar, E: Env>(
    model: &Model<S>,
    env: &mut E,
    target_rtg: f64,
    mut observe: impl FnMut(&History, f64) -> Result<()>,
) -> Result<EpisodeTrace> {
    check_env(model, env)?;
    let k = model.config.context_length;
    let mut history = History::default();
    history.push(env.observe(), env.timestep());
    let mut rtg = target_rtg;
    let mut trace = EpisodeTrace { rewards: Vec::new(), presented_rtgs: Vec::new(), actions: Vec::new() };
    while !env.is_done() {
        observe(&history, rtg)?;
        let action = act(model, env, &history, rtg)?;
        trace.presented_rtgs.push(rtg);
        let step = env.step(&action)?;
        trace.rewards.push(step.reward);
        trace.actions.push(action.clone());
        history.actions.push(action);
        history.past_rtgs.push(rtg);
        rtg -= step.reward;
        if step.done {
            break;
        }
        history.push(step.obs, env.timestep());
        history.truncate_front(k);
    }
    Ok(trace)
}

pub fn run_episode<S: Scalar, E: Env>(model: &Model<S>, env: &mut E, target_rtg: f64) -> Result<EpisodeTrace> {
    run_episode_with(model, env, target_rtg, |_, _| Ok(()))
}

/// Evaluates `episodes` episodes from environments built by `make_env`
/// (called with each episode's seed).
pub fn rollout_with<S: Scalar, E: Env>(
    model: &Model<S>,
    mut make_env: impl FnMut(u64) -> E,
    target_rtg: f64,
    episodes: usize,
    seed: u64,
    refs: Option<ReferenceScores>,
) -> Result<EvalReport> {
    if episodes == 0 {
        return Err(Error::InvalidArgument("episodes must be >= 1".into()));
    }
    let seeds: Vec<u64> = (0..episodes).map(|i| episode_seed(seed, i)).collect();
    let mut returns = Vec::with_capacity(episodes);
    for &s in &seeds {
        let mut env = make_env(s);
        returns.push(run_episode(model, &mut env, target_rtg)?.episode_return());
    }
    let (mean, std_error) = mean_and_se(&returns);
    let (normalized, normalized_std_error) = match refs {
        Some(r) => (Some(normalized_score(mean, r.random, r.expert)?), Some(100.0 * std_error / (r.expert - r.random).abs())),
        None => (None, None),
    };
    Ok(EvalReport { returns, mean, std_error, normalized, normalized_std_error, target_rtg, episodes, seeds })
}

/// Evaluates on a built-in environment, normalizing against its scripted
/// random and expert references.
pub fn rollout<S: Scalar>(model: &Model<S>, env: EnvKind, target_rtg: f64, episodes: usize, seed: u64) -> Result<EvalReport> {
    let refs = cached_reference_scores(env)?;
    rollout_with(model, |s| env.make(s), target_rtg, episodes, seed, Some(refs))
}
