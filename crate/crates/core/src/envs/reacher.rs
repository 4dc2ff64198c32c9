use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Env, Step};
use crate::error::{Error, Result};
use crate::model::{Action, ActionSpace};

pub const REACHER_HORIZON: usize = 20;
pub const REACHER_GOAL: f64 = 1.0;
pub const REACHER_BOUND: f64 = 2.0;
const STEP_SIZE: f64 = 0.1;

/// One-dimensional point that should move to x = 1 within a fixed horizon.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearReacher {
    x: f64,
    t: usize,
    horizon: usize,
}

impl LinearReacher {
    /// Start position drawn uniformly from [−1, 1].
    pub fn new(rng: &mut ChaCha8Rng) -> Self {
        Self::with_position(rng.random_range(-1.0..1.0))
    }

    pub fn with_position(x: f64) -> Self {
        LinearReacher { x: x.clamp(-REACHER_BOUND, REACHER_BOUND), t: 0, horizon: REACHER_HORIZON }
    }

    pub fn position(&self) -> f64 {
        self.x
    }

    /// Scripted controller saturating toward the goal.
    pub fn expert_action(&self) -> f64 {
        (10.0 * (REACHER_GOAL - self.x)).clamp(-1.0, 1.0)
    }

    pub fn step_scalar(&mut self, action: f64) -> Result<Step> {
        if self.is_done() {
            return Err(Error::EpisodeDone);
        }
        let a = if action.is_nan() { 0.0 } else { action.clamp(-1.0, 1.0) };
        self.x = (self.x + STEP_SIZE * a).clamp(-REACHER_BOUND, REACHER_BOUND);
        self.t += 1;
        Ok(Step { obs: vec![self.x], reward: -(self.x - REACHER_GOAL).abs(), done: self.is_done() })
    }
}

impl Env for LinearReacher {
    fn obs_dim(&self) -> usize {
        1
    }
    fn action_dim(&self) -> usize {
        1
    }
    fn action_space(&self) -> ActionSpace {
        ActionSpace::Continuous
    }
    fn observe(&self) -> Vec<f64> {
        vec![self.x]
    }
    fn timestep(&self) -> usize {
        self.t
    }
    fn is_done(&self) -> bool {
        self.t >= self.horizon
    }
    fn step(&mut self, action: &Action) -> Result<Step> {
        match action {
            Action::Continuous(v) if v.len() == 1 => self.step_scalar(v[0]),
            other => Err(Error::InvalidArgument(format!("reacher expects a 1-d continuous action, got {other:?}"))),
        }
    }
}
