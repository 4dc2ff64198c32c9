//! Toy environments, scripted behaviors and dataset generation.

mod game2048;
mod reacher;

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use game2048::{empty_cells, slide, slide_line, Direction, Game2048, Grid, SlideOutcome, DEFAULT_MAX_MOVES, DEFAULT_TARGET_TILE};
pub use reacher::{LinearReacher, REACHER_BOUND, REACHER_GOAL, REACHER_HORIZON};

use crate::data::{Actions, Dataset, Trajectory};
use crate::error::{Error, Result};
use crate::model::{Action, ActionSpace};

/// Episodes used for the random and expert reference returns.
pub const REFERENCE_EPISODES: usize = 500;
pub const REFERENCE_SEED: u64 = 0x5EED_2EF5;

#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub obs: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

pub trait Env {
    fn obs_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn action_space(&self) -> ActionSpace;
    fn observe(&self) -> Vec<f64>;
    /// Steps taken so far.
    fn timestep(&self) -> usize;
    fn is_done(&self) -> bool;
    fn step(&mut self, action: &Action) -> Result<Step>;
    /// Per-action legality for discrete environments.
    fn legal_actions(&self) -> Option<Vec<bool>> {
        None
    }
}

impl<E: Env + ?Sized> Env for Box<E> {
    fn obs_dim(&self) -> usize {
        (**self).obs_dim()
    }
    fn action_dim(&self) -> usize {
        (**self).action_dim()
    }
    fn action_space(&self) -> ActionSpace {
        (**self).action_space()
    }
    fn observe(&self) -> Vec<f64> {
        (**self).observe()
    }
    fn timestep(&self) -> usize {
        (**self).timestep()
    }
    fn is_done(&self) -> bool {
        (**self).is_done()
    }
    fn step(&mut self, action: &Action) -> Result<Step> {
        (**self).step(action)
    }
    fn legal_actions(&self) -> Option<Vec<bool>> {
        (**self).legal_actions()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EnvKind {
    Reacher,
    Game2048,
}

impl EnvKind {
    pub fn id(self) -> &'static str {
        match self {
            EnvKind::Reacher => "reacher",
            EnvKind::Game2048 => "g2048",
        }
    }

    pub fn obs_dim(self) -> usize {
        match self {
            EnvKind::Reacher => 1,
            EnvKind::Game2048 => 16,
        }
    }

    pub fn action_dim(self) -> usize {
        match self {
            EnvKind::Reacher => 1,
            EnvKind::Game2048 => 4,
        }
    }

    pub fn action_space(self) -> ActionSpace {
        match self {
            EnvKind::Reacher => ActionSpace::Continuous,
            EnvKind::Game2048 => ActionSpace::Discrete,
        }
    }

    /// Fresh environment whose initial state and dynamics noise come from `seed`.
    pub fn make(self, seed: u64) -> EnvInstance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match self {
            EnvKind::Reacher => EnvInstance::Reacher(LinearReacher::new(&mut rng)),
            EnvKind::Game2048 => EnvInstance::Game2048(Game2048::new(rng)),
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for EnvKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reacher" => Ok(EnvKind::Reacher),
            "g2048" | "2048" => Ok(EnvKind::Game2048),
            other => Err(Error::InvalidArgument(format!("unknown env `{other}` (reacher|g2048)"))),
        }
    }
}

#[derive(Clone, Debug)]
pub enum EnvInstance {
    Reacher(LinearReacher),
    Game2048(Game2048),
}

impl EnvInstance {
    fn inner(&self) -> &dyn Env {
        match self {
            EnvInstance::Reacher(e) => e,
            EnvInstance::Game2048(e) => e,
        }
    }

    fn inner_mut(&mut self) -> &mut dyn Env {
        match self {
            EnvInstance::Reacher(e) => e,
            EnvInstance::Game2048(e) => e,
        }
    }
}

impl Env for EnvInstance {
    fn obs_dim(&self) -> usize {
        self.inner().obs_dim()
    }
    fn action_dim(&self) -> usize {
        self.inner().action_dim()
    }
    fn action_space(&self) -> ActionSpace {
        self.inner().action_space()
    }
    fn observe(&self) -> Vec<f64> {
        self.inner().observe()
    }
    fn timestep(&self) -> usize {
        self.inner().timestep()
    }
    fn is_done(&self) -> bool {
        self.inner().is_done()
    }
    fn step(&mut self, action: &Action) -> Result<Step> {
        self.inner_mut().step(action)
    }
    fn legal_actions(&self) -> Option<Vec<bool>> {
        self.inner().legal_actions()
    }
}

/// Scripted data-collection policy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Behavior {
    Random,
    Expert,
    /// Expert with probability `p`, otherwise random, decided per step.
    Mixture(f64),
}

impl fmt::Display for Behavior {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Behavior::Random => f.write_str("random"),
            Behavior::Expert => f.write_str("expert"),
            Behavior::Mixture(p) => write!(f, "mix:{p}"),
        }
    }
}

impl FromStr for Behavior {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Behavior::Random),
            "expert" => Ok(Behavior::Expert),
            _ => {
                let p: f64 = s
                    .strip_prefix("mix:")
                    .and_then(|p| p.parse().ok())
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown behavior `{s}` (random|expert|mix:<p>)")))?;
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::InvalidArgument(format!("mixture probability {p} outside [0, 1]")));
                }
                Ok(Behavior::Mixture(p))
            }
        }
    }
}

const COIN_STREAM: u64 = 1;
const ACTION_STREAM: u64 = 2;

fn stream(seed: u64, s: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(s);
    r
}

/// Uniformly random action, restricted to legal moves when known.
pub fn random_action(env: &EnvInstance, rng: &mut ChaCha8Rng) -> Action {
    match env {
        EnvInstance::Reacher(_) => Action::Continuous(vec![rng.random_range(-1.0..1.0)]),
        EnvInstance::Game2048(g) => {
            let legal: Vec<usize> = (0..4).filter(|&i| g.legal_moves()[i]).collect();
            Action::Discrete(if legal.is_empty() { 0 } else { legal[rng.random_range(0..legal.len())] })
        }
    }
}

/// Scripted expert. On 2048 it greedily maximizes (merges, empty cells)
/// after the move, preferring Up, Down, Left, Right on ties.
pub fn expert_action(env: &EnvInstance) -> Action {
    match env {
        EnvInstance::Reacher(r) => Action::Continuous(vec![r.expert_action()]),
        EnvInstance::Game2048(g) => {
            let mut best: Option<(usize, (usize, usize))> = None;
            for d in Direction::ALL {
                let out = slide(g.grid(), d);
                if !out.changed {
                    continue;
                }
                let score = (out.merges, empty_cells(&out.grid));
                if best.is_none_or(|(_, s)| score > s) {
                    best = Some((d as usize, score));
                }
            }
            Action::Discrete(best.map_or(0, |(i, _)| i))
        }
    }
}

/// Runs one episode of `behavior` in a fresh environment seeded by `seed`.
pub fn gen_episode(kind: EnvKind, behavior: Behavior, seed: u64) -> Result<Trajectory> {
    let mut env = kind.make(seed);
    let mut coin = stream(seed, COIN_STREAM);
    let mut act_rng = stream(seed, ACTION_STREAM);
    let (mut obs, mut rewards) = (Vec::new(), Vec::new());
    let (mut cont, mut disc) = (Vec::new(), Vec::new());
    while !env.is_done() {
        obs.extend(env.observe());
        let expert = match behavior {
            Behavior::Random => false,
            Behavior::Expert => true,
            Behavior::Mixture(p) => coin.random::<f64>() < p,
        };
        let action = if expert { expert_action(&env) } else { random_action(&env, &mut act_rng) };
        let step = env.step(&action)?;
        match action {
            Action::Continuous(v) => cont.extend(v),
            Action::Discrete(i) => disc.push(i),
        }
        rewards.push(step.reward);
    }
    let actions = match kind.action_space() {
        ActionSpace::Continuous => Actions::Continuous { dim: kind.action_dim(), values: cont },
        ActionSpace::Discrete => Actions::Discrete { num_actions: kind.action_dim(), values: disc },
    };
    Trajectory::new(kind.id(), behavior.to_string(), kind.obs_dim(), obs, actions, rewards)
}

/// Seed of episode `i` in a run seeded by `seed`.
pub fn episode_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64)
}

pub fn gen_dataset(kind: EnvKind, behavior: Behavior, episodes: usize, seed: u64) -> Result<Dataset> {
    if episodes == 0 {
        return Err(Error::InvalidArgument("episodes must be positive".into()));
    }
    let trajs = (0..episodes).map(|i| gen_episode(kind, behavior, episode_seed(seed, i))).collect::<Result<Vec<_>>>()?;
    Dataset::new(trajs)
}

/// Mean returns of the random and expert behaviors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReferenceScores {
    pub random: f64,
    pub expert: f64,
}

pub fn reference_scores(kind: EnvKind) -> Result<ReferenceScores> {
    let mean = |b: Behavior| -> Result<f64> {
        let ds = gen_dataset(kind, b, REFERENCE_EPISODES, REFERENCE_SEED)?;
        Ok(ds.trajectories.iter().map(Trajectory::episode_return).sum::<f64>() / REFERENCE_EPISODES as f64)
    };
    Ok(ReferenceScores { random: mean(Behavior::Random)?, expert: mean(Behavior::Expert)? })
}

/// [`reference_scores`] computed once per process.
pub fn cached_reference_scores(kind: EnvKind) -> Result<ReferenceScores> {
    static REACHER: OnceLock<ReferenceScores> = OnceLock::new();
    static GAME: OnceLock<ReferenceScores> = OnceLock::new();
    let cell = match kind {
        EnvKind::Reacher => &REACHER,
        EnvKind::Game2048 => &GAME,
    };
    if let Some(r) = cell.get() {
        return Ok(*r);
    }
    let r = reference_scores(kind)?;
    Ok(*cell.get_or_init(|| r))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn episodes_are_deterministic() {
        for kind in [EnvKind::Reacher, EnvKind::Game2048] {
            let a = gen_episode(kind, Behavior::Mixture(0.5), 17).unwrap();
            let b = gen_episode(kind, Behavior::Mixture(0.5), 17).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn mixture_endpoints_match_pure_behaviors() {
        for kind in [EnvKind::Reacher, EnvKind::Game2048] {
            let strip = |mut t: Trajectory| {
                t.behavior_tag.clear();
                t
            };
            assert_eq!(strip(gen_episode(kind, Behavior::Mixture(1.0), 4).unwrap()), strip(gen_episode(kind, Behavior::Expert, 4).unwrap()));
            assert_eq!(strip(gen_episode(kind, Behavior::Mixture(0.0), 4).unwrap()), strip(gen_episode(kind, Behavior::Random, 4).unwrap()));
        }
    }

    #[test]
    fn reacher_expert_beats_random() {
        let r = reference_scores(EnvKind::Reacher).unwrap();
        assert!(r.expert > r.random + 1.0, "{r:?}");
        let t = gen_episode(EnvKind::Reacher, Behavior::Expert, 1).unwrap();
        assert_eq!(t.len(), REACHER_HORIZON);
    }

    #[test]
    fn behavior_parsing() {
        assert_eq!("mix:0.25".parse::<Behavior>().unwrap(), Behavior::Mixture(0.25));
        assert!("mix:2".parse::<Behavior>().is_err());
        assert_eq!(Behavior::Mixture(0.5).to_string(), "mix:0.5");
    }
}
