use rand::Rng;

use super::{Actions, Dataset};
use crate::error::{Error, Result};
use crate::model::{ActionSpace, Variant};

#[derive(Clone, Debug, PartialEq)]
pub enum ActionTargets {
    /// `B × k × action_dim`.
    Continuous(Vec<f64>),
    /// `B × k` class indices.
    Discrete(Vec<usize>),
}

/// Fixed-width training windows, left-padded to `k` timesteps.
///
/// Padded positions carry zero observations, actions and returns, timestep
/// 0 and a false `loss_mask`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextBatch {
    pub variant: Variant,
    pub batch_size: usize,
    pub k: usize,
    pub obs_dim: usize,
    pub action_dim: usize,
    /// `B × k × obs_dim`.
    pub obs: Vec<f64>,
    /// Model-input action encoding, `B × k × action_dim`.
    pub actions: Vec<f64>,
    pub targets: ActionTargets,
    /// Scaled returns-to-go, `B × k`.
    pub rtgs: Vec<f64>,
    pub timesteps: Vec<usize>,
    pub loss_mask: Vec<bool>,
}

impl ContextBatch {
    pub fn empty(variant: Variant, k: usize, obs_dim: usize, action_dim: usize, space: ActionSpace) -> Self {
        ContextBatch {
            variant,
            batch_size: 0,
            k,
            obs_dim,
            action_dim,
            obs: Vec::new(),
            actions: Vec::new(),
            targets: match space {
                ActionSpace::Continuous => ActionTargets::Continuous(Vec::new()),
                ActionSpace::Discrete => ActionTargets::Discrete(Vec::new()),
            },
            rtgs: Vec::new(),
            timesteps: Vec::new(),
            loss_mask: Vec::new(),
        }
    }

    /// Appends one window of `n ≤ k` real steps, left-padding the rest.
    ///
    /// `actions` holds the input encoding (`n × action_dim`); discrete
    /// windows also pass their class indices in `classes`.
    pub fn push_window(
        &mut self,
        obs: &[f64],
        actions: &[f64],
        classes: Option<&[usize]>,
        scaled_rtgs: &[f64],
        timesteps: &[usize],
    ) -> Result<()> {
        let n = timesteps.len();
        if n == 0 || n > self.k {
            return Err(Error::InvalidArgument(format!("window of {n} steps for context length {}", self.k)));
        }
        if obs.len() != n * self.obs_dim || actions.len() != n * self.action_dim || scaled_rtgs.len() != n {
            return Err(Error::ShapeMismatch {
                op: "push_window",
                lhs: vec![n, self.obs_dim, self.action_dim],
                rhs: vec![obs.len(), actions.len(), scaled_rtgs.len()],
            });
        }
        let pad = self.k - n;
        self.obs.extend(std::iter::repeat_n(0.0, pad * self.obs_dim).chain(obs.iter().copied()));
        self.actions.extend(std::iter::repeat_n(0.0, pad * self.action_dim).chain(actions.iter().copied()));
        match (&mut self.targets, classes) {
            (ActionTargets::Continuous(t), None) => {
                t.extend(std::iter::repeat_n(0.0, pad * self.action_dim).chain(actions.iter().copied()))
            }
            (ActionTargets::Discrete(t), Some(c)) if c.len() == n => {
                t.extend(std::iter::repeat_n(0, pad).chain(c.iter().copied()))
            }
            _ => return Err(Error::InvalidArgument("action targets do not match the action space".into())),
        }
        self.rtgs.extend(std::iter::repeat_n(0.0, pad).chain(scaled_rtgs.iter().copied()));
        self.timesteps.extend(std::iter::repeat_n(0, pad).chain(timesteps.iter().copied()));
        self.loss_mask.extend(std::iter::repeat_n(false, pad).chain(std::iter::repeat_n(true, n)));
        self.batch_size += 1;
        Ok(())
    }

    pub fn action_space(&self) -> ActionSpace {
        match self.targets {
            ActionTargets::Continuous(_) => ActionSpace::Continuous,
            ActionTargets::Discrete(_) => ActionSpace::Discrete,
        }
    }

    /// Copies sample `i` into a batch of one.
    pub fn sample(&self, i: usize) -> ContextBatch {
        let (k, od, ad) = (self.k, self.obs_dim, self.action_dim);
        ContextBatch {
            variant: self.variant,
            batch_size: 1,
            k,
            obs_dim: od,
            action_dim: ad,
            obs: self.obs[i * k * od..(i + 1) * k * od].to_vec(),
            actions: self.actions[i * k * ad..(i + 1) * k * ad].to_vec(),
            targets: match &self.targets {
                ActionTargets::Continuous(t) => ActionTargets::Continuous(t[i * k * ad..(i + 1) * k * ad].to_vec()),
                ActionTargets::Discrete(t) => ActionTargets::Discrete(t[i * k..(i + 1) * k].to_vec()),
            },
            rtgs: self.rtgs[i * k..(i + 1) * k].to_vec(),
            timesteps: self.timesteps[i * k..(i + 1) * k].to_vec(),
            loss_mask: self.loss_mask[i * k..(i + 1) * k].to_vec(),
        }
    }
}

/// Samples `batch_size` suffix windows uniformly over all
/// `(trajectory, end timestep)` pairs.
pub fn sample_context_batch<R: Rng + ?Sized>(
    dataset: &Dataset,
    k: usize,
    batch_size: usize,
    rng: &mut R,
    rtg_scale: f64,
    variant: Variant,
) -> Result<ContextBatch> {
    if k < 1 {
        return Err(Error::InvalidArgument("context length k must be >= 1".into()));
    }
    if dataset.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    if !(rtg_scale > 0.0) {
        return Err(Error::InvalidArgument(format!("rtg_scale must be positive, got {rtg_scale}")));
    }
    // cumulative episode lengths for pair sampling
    let mut ends = Vec::with_capacity(dataset.len());
    let mut total = 0usize;
    for t in &dataset.trajectories {
        total += t.len();
        ends.push(total);
    }
    let mut batch = ContextBatch::empty(variant, k, dataset.obs_dim(), dataset.action_dim(), dataset.action_space());
    let mut acts = Vec::new();
    for _ in 0..batch_size {
        let flat = rng.random_range(0..total);
        let ti = ends.partition_point(|&e| e <= flat);
        let traj = &dataset.trajectories[ti];
        let end = flat - (ends[ti] - traj.len());
        let start = (end + 1).saturating_sub(k);
        acts.clear();
        for t in start..=end {
            traj.actions.encode_into(t, &mut acts);
        }
        let classes = match &traj.actions {
            Actions::Discrete { values, .. } => Some(&values[start..=end]),
            Actions::Continuous { .. } => None,
        };
        let rtgs: Vec<f64> = traj.rtgs[start..=end].iter().map(|r| r / rtg_scale).collect();
        batch.push_window(
            &traj.observations[start * traj.obs_dim..(end + 1) * traj.obs_dim],
            &acts,
            classes,
            &rtgs,
            &traj.timesteps[start..=end],
        )?;
    }
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Trajectory;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dataset(lengths: &[usize]) -> Dataset {
        let trajs = lengths
            .iter()
            .enumerate()
            .map(|(e, &n)| {
                let obs: Vec<f64> = (0..n).map(|t| (e * 100 + t) as f64).collect();
                Trajectory::new(
                    "reacher",
                    "test",
                    1,
                    obs.clone(),
                    Actions::Continuous { dim: 1, values: obs.iter().map(|o| o * 0.01).collect() },
                    vec![-1.0; n],
                )
                .unwrap()
            })
            .collect();
        Dataset::new(trajs).unwrap()
    }

    #[test]
    fn windows_stay_inside_one_episode() {
        let ds = dataset(&[3, 7, 1, 12]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = sample_context_batch(&ds, 5, 200, &mut rng, 12.0, Variant::Dt).unwrap();
        for i in 0..b.batch_size {
            let s = b.sample(i);
            let live: Vec<usize> = (0..5).filter(|&t| s.loss_mask[t]).collect();
            // padding only on the left
            assert_eq!(live, (5 - live.len()..5).collect::<Vec<_>>());
            let episodes: Vec<usize> = live.iter().map(|&t| s.obs[t] as usize / 100).collect();
            assert!(episodes.windows(2).all(|w| w[0] == w[1]));
            assert!(live.windows(2).all(|w| s.timesteps[w[1]] == s.timesteps[w[0]] + 1));
            for &t in &live {
                assert!(s.rtgs[t].abs() <= 1.0);
            }
        }
    }

    #[test]
    fn minimal_and_full_windows() {
        let ds = dataset(&[1]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = sample_context_batch(&ds, 4, 1, &mut rng, 1.0, Variant::Ddt).unwrap();
        assert_eq!(b.loss_mask.iter().filter(|&&m| m).count(), 1);
        assert_eq!(b.loss_mask, vec![false, false, false, true]);
        let ds = dataset(&[4]);
        let mut full = 0;
        let b = sample_context_batch(&ds, 4, 50, &mut rng, 1.0, Variant::Ddt).unwrap();
        for i in 0..50 {
            if b.sample(i).timesteps[3] == 3 {
                full += 1;
                assert!(b.sample(i).loss_mask.iter().all(|&m| m));
            }
        }
        assert!(full > 0);
    }

    #[test]
    fn seeded_sampling_is_repeatable() {
        let ds = dataset(&[5, 9]);
        let a = sample_context_batch(&ds, 3, 16, &mut ChaCha8Rng::seed_from_u64(9), 2.0, Variant::Dt).unwrap();
        let b = sample_context_batch(&ds, 3, 16, &mut ChaCha8Rng::seed_from_u64(9), 2.0, Variant::Dt).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_zero_context() {
        let ds = dataset(&[2]);
        assert!(sample_context_batch(&ds, 0, 1, &mut ChaCha8Rng::seed_from_u64(0), 1.0, Variant::Dt).is_err());
    }
}
