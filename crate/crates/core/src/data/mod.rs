//! Trajectories, returns-to-go and context-window batching.

mod batch;
mod io;

use std::fmt;

pub use batch::{sample_context_batch, ActionTargets, ContextBatch};
pub use io::{read_dataset, write_dataset, DATASET_FORMAT_VERSION};

use crate::error::{Error, Result};
use crate::model::{Action, ActionSpace};

/// Tolerance for rebuilding a return-to-go sequence from its last entry.
pub const RTG_RECONSTRUCTION_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub enum Actions {
    Continuous { dim: usize, values: Vec<f64> },
    Discrete { num_actions: usize, values: Vec<usize> },
}

impl Actions {
    pub fn len(&self) -> usize {
        match self {
            Actions::Continuous { dim, values } => values.len() / dim,
            Actions::Discrete { values, .. } => values.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Width of the model-input encoding.
    pub fn dim(&self) -> usize {
        match self {
            Actions::Continuous { dim, .. } => *dim,
            Actions::Discrete { num_actions, .. } => *num_actions,
        }
    }

    pub fn space(&self) -> ActionSpace {
        match self {
            Actions::Continuous { .. } => ActionSpace::Continuous,
            Actions::Discrete { .. } => ActionSpace::Discrete,
        }
    }

    pub fn get(&self, t: usize) -> Action {
        match self {
            Actions::Continuous { dim, values } => Action::Continuous(values[t * dim..(t + 1) * dim].to_vec()),
            Actions::Discrete { values, .. } => Action::Discrete(values[t]),
        }
    }

    /// Appends the encoding of step `t` (raw vector or one-hot).
    pub(crate) fn encode_into(&self, t: usize, out: &mut Vec<f64>) {
        match self {
            Actions::Continuous { dim, values } => out.extend_from_slice(&values[t * dim..(t + 1) * dim]),
            Actions::Discrete { num_actions, values } => {
                let start = out.len();
                out.resize(start + num_actions, 0.0);
                out[start + values[t]] = 1.0;
            }
        }
    }
}

/// One episode.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub env_id: String,
    pub behavior_tag: String,
    pub obs_dim: usize,
    /// Row-major `T × obs_dim`.
    pub observations: Vec<f64>,
    pub actions: Actions,
    pub rewards: Vec<f64>,
    pub rtgs: Vec<f64>,
    pub timesteps: Vec<usize>,
}

impl Trajectory {
    /// Builds a trajectory, deriving returns-to-go and timesteps `0..T`.
    pub fn new(
        env_id: impl Into<String>,
        behavior_tag: impl Into<String>,
        obs_dim: usize,
        observations: Vec<f64>,
        actions: Actions,
        rewards: Vec<f64>,
    ) -> Result<Self> {
        let rtgs = compute_rtgs(&rewards)?;
        let t = rewards.len();
        let traj = Trajectory {
            env_id: env_id.into(),
            behavior_tag: behavior_tag.into(),
            obs_dim,
            observations,
            actions,
            rewards,
            rtgs,
            timesteps: (0..t).collect(),
        };
        traj.check_lengths()?;
        Ok(traj)
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn episode_return(&self) -> f64 {
        self.rtgs.first().copied().unwrap_or(0.0)
    }

    pub fn obs(&self, t: usize) -> &[f64] {
        &self.observations[t * self.obs_dim..(t + 1) * self.obs_dim]
    }

    pub(crate) fn check_lengths(&self) -> Result<()> {
        let t = self.rewards.len();
        let bad = |what: &str, n: usize| Err(Error::InvalidArgument(format!("trajectory {what} has length {n}, expected {t}")));
        if t == 0 {
            return Err(Error::Empty("trajectory"));
        }
        if self.obs_dim == 0 || self.observations.len() != t * self.obs_dim {
            return bad("observations", self.observations.len() / self.obs_dim.max(1));
        }
        if self.actions.len() != t {
            return bad("actions", self.actions.len());
        }
        if self.rtgs.len() != t {
            return bad("rtgs", self.rtgs.len());
        }
        if self.timesteps.len() != t {
            return bad("timesteps", self.timesteps.len());
        }
        if let Actions::Discrete { num_actions, values } = &self.actions {
            if let Some(a) = values.iter().find(|&&a| a >= *num_actions) {
                return Err(Error::InvalidArgument(format!("discrete action {a} >= {num_actions}")));
            }
        }
        Ok(())
    }
}

/// Suffix sums: `rtgs[i] = Σ_{j ≥ i} rewards[j]`.
pub fn compute_rtgs(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.is_empty() {
        return Err(Error::Empty("rewards"));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::NonFinite("compute_rtgs"));
    }
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for i in (0..rewards.len()).rev() {
        acc += rewards[i];
        out[i] = acc;
    }
    Ok(out)
}

/// Checks that the return-to-go sequence is fully determined by its last
/// entry and the rewards: `R̂_i = R̂_{i+1} + r_i`.
pub fn verify_rtg_decomposition(traj: &Trajectory) -> bool {
    let (rtgs, rewards) = (&traj.rtgs, &traj.rewards);
    if rtgs.len() != rewards.len() || rtgs.is_empty() {
        return false;
    }
    let mut rebuilt = rtgs[rtgs.len() - 1];
    for i in (0..rtgs.len() - 1).rev() {
        rebuilt += rewards[i];
        if (rebuilt - rtgs[i]).abs() > RTG_RECONSTRUCTION_TOL {
            return false;
        }
    }
    true
}

/// Immutable collection of trajectories from one environment.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
}

impl Dataset {
    pub fn new(trajectories: Vec<Trajectory>) -> Result<Self> {
        let first = trajectories.first().ok_or(Error::Empty("dataset"))?;
        let (obs_dim, adim, space) = (first.obs_dim, first.actions.dim(), first.actions.space());
        for (i, t) in trajectories.iter().enumerate() {
            if t.obs_dim != obs_dim || t.actions.dim() != adim || t.actions.space() != space {
                return Err(Error::InvalidArgument(format!("trajectory {i} dimensions differ from trajectory 0")));
            }
        }
        Ok(Dataset { trajectories })
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn obs_dim(&self) -> usize {
        self.trajectories[0].obs_dim
    }

    pub fn action_dim(&self) -> usize {
        self.trajectories[0].actions.dim()
    }

    pub fn action_space(&self) -> ActionSpace {
        self.trajectories[0].actions.space()
    }

    pub fn env_id(&self) -> &str {
        &self.trajectories[0].env_id
    }

    pub fn total_steps(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    pub fn stats(&self) -> DatasetStats {
        let returns: Vec<f64> = self.trajectories.iter().map(Trajectory::episode_return).collect();
        let n = returns.len() as f64;
        let mean = returns.iter().sum::<f64>() / n;
        let min = returns.iter().copied().fold(f64::INFINITY, f64::min);
        let max = returns.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let max_abs = returns.iter().map(|r| r.abs()).fold(0.0, f64::max);
        DatasetStats {
            episodes: self.trajectories.len(),
            steps: self.total_steps(),
            return_mean: mean,
            return_min: min,
            return_max: max,
            suggested_rtg_scale: if max_abs > 0.0 { max_abs } else { 1.0 },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetStats {
    pub episodes: usize,
    pub steps: usize,
    pub return_mean: f64,
    pub return_min: f64,
    pub return_max: f64,
    /// Max absolute episode return (1 when every return is zero).
    pub suggested_rtg_scale: f64,
}

impl DatasetStats {
    pub fn key_values(&self) -> Vec<(&'static str, String)> {
        vec![
            ("episodes", self.episodes.to_string()),
            ("steps", self.steps.to_string()),
            ("return_mean", format!("{:.6}", self.return_mean)),
            ("return_min", format!("{:.6}", self.return_min)),
            ("return_max", format!("{:.6}", self.return_max)),
            ("suggested_rtg_scale", format!("{:.6}", self.suggested_rtg_scale)),
        ]
    }
}

impl fmt::Display for DatasetStats {
    /// Aligned table followed by `key=value` lines.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kv = self.key_values();
        let width = kv.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        for (k, v) in &kv {
            writeln!(f, "{k:<width$}  {v:>14}")?;
        }
        for (k, v) in &kv {
            writeln!(f, "{k}={v}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn traj(rewards: Vec<f64>) -> Trajectory {
        let t = rewards.len();
        Trajectory::new(
            "reacher",
            "test",
            1,
            vec![0.0; t],
            Actions::Continuous { dim: 1, values: vec![0.0; t] },
            rewards,
        )
        .unwrap()
    }

    #[test]
    fn rtg_examples() {
        assert_eq!(compute_rtgs(&[1.0, 0.0, 2.0]).unwrap(), vec![3.0, 2.0, 2.0]);
        assert_eq!(compute_rtgs(&[0.0; 3]).unwrap(), vec![0.0; 3]);
        assert_eq!(compute_rtgs(&[-0.7]).unwrap(), vec![-0.7]);
        assert!(matches!(compute_rtgs(&[]), Err(Error::Empty(_))));
    }

    #[test]
    fn decomposition_detects_perturbation() {
        let mut t = traj(vec![0.5, -1.0, 0.25, 2.0]);
        assert!(verify_rtg_decomposition(&t));
        t.rtgs[1] += 1e-3;
        assert!(!verify_rtg_decomposition(&t));
        let single = traj(vec![3.0]);
        assert!(verify_rtg_decomposition(&single));
    }

    #[test]
    fn stats_report_has_key_values() {
        let ds = Dataset::new(vec![traj(vec![1.0, 1.0]), traj(vec![-4.0])]).unwrap();
        let s = ds.stats();
        assert_eq!(s.episodes, 2);
        assert_eq!(s.return_max, 2.0);
        assert_eq!(s.suggested_rtg_scale, 4.0);
        let text = s.to_string();
        assert!(text.contains("suggested_rtg_scale=4.000000"));
        assert!(text.contains("return_mean=-1.000000"));
    }

    proptest! {
        #[test]
        fn rtg_invariants_hold(rewards in prop::collection::vec(-3.0f64..3.0, 1..60)) {
            let t = traj(rewards.clone());
            prop_assert_eq!(*t.rtgs.last().unwrap(), *rewards.last().unwrap());
            for i in 0..rewards.len() - 1 {
                prop_assert!((t.rtgs[i] - t.rtgs[i + 1] - rewards[i]).abs() < 1e-9);
            }
            prop_assert!(verify_rtg_decomposition(&t));
        }
    }
}
