//! GPT backbone with three return-conditioning variants.
//!
//! * [`Variant::Dt`] interleaves `(R̂, o, a)` tokens per timestep.
//! * [`Variant::BlockedDt`] uses the same tokens but hides every return token
//!   except the query's own timestep.
//! * [`Variant::Ddt`] feeds only `(o, a)` tokens and injects the return at the
//!   action-prediction hidden state through adaptive layer norm.

mod checkpoint;
mod forward;
mod mask;
mod params;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FORMAT_VERSION};
pub use forward::{AttentionMatrices, ForwardPass, History, Model};
pub(crate) use forward::argmax;
pub use mask::{build_attention_mask, token_layout, MaskMatrix, Modality};
pub use params::{AdaLnHead, Block, LayerNormAffine, Linear, Parameters};

use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Dt,
    BlockedDt,
    Ddt,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Dt, Variant::BlockedDt, Variant::Ddt];

    /// Tokens emitted per timestep.
    pub fn tokens_per_step(self) -> usize {
        match self {
            Variant::Dt | Variant::BlockedDt => 3,
            Variant::Ddt => 2,
        }
    }

    pub fn uses_rtg_tokens(self) -> bool {
        self != Variant::Ddt
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Dt => "dt",
            Variant::BlockedDt => "blocked-dt",
            Variant::Ddt => "ddt",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dt" => Ok(Variant::Dt),
            "blocked-dt" => Ok(Variant::BlockedDt),
            "ddt" => Ok(Variant::Ddt),
            other => Err(Error::InvalidArgument(format!("unknown variant `{other}` (dt|blocked-dt|ddt)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActionSpace {
    Continuous,
    Discrete,
}

/// An action emitted by a policy or stored in a trajectory.
#[derive(Clone, Debug, PartialEq)]
pub enum Action {
    Continuous(Vec<f64>),
    Discrete(usize),
}

impl Action {
    /// Model-input encoding: raw vector or one-hot.
    pub fn encode(&self, action_dim: usize) -> Vec<f64> {
        match self {
            Action::Continuous(v) => v.clone(),
            Action::Discrete(i) => {
                let mut v = vec![0.0; action_dim];
                v[*i] = 1.0;
                v
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Context length in timesteps.
    pub context_length: usize,
    pub max_timestep: usize,
    pub obs_dim: usize,
    pub action_dim: usize,
    pub action_space: ActionSpace,
    pub adaln_depth: usize,
    pub dropout: f64,
    /// Divisor applied to every return-to-go before it enters the model.
    pub rtg_scale: f64,
}

impl ModelConfig {
    pub fn new(variant: Variant, obs_dim: usize, action_dim: usize, action_space: ActionSpace) -> Self {
        ModelConfig {
            variant,
            d_model: 128,
            n_layers: 3,
            n_heads: 1,
            context_length: 20,
            max_timestep: 1024,
            obs_dim,
            action_dim,
            action_space,
            adaln_depth: 1,
            dropout: 0.1,
            rtg_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.context_length < 1 {
            return bad("context_length must be >= 1".into());
        }
        if !(self.rtg_scale > 0.0 && self.rtg_scale.is_finite()) {
            return bad(format!("rtg_scale must be positive, got {}", self.rtg_scale));
        }
        if !(1..=2).contains(&self.adaln_depth) {
            return bad(format!("adaln_depth must be 1 or 2, got {}", self.adaln_depth));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.obs_dim == 0 || self.action_dim == 0 || self.max_timestep == 0 || self.n_layers == 0 {
            return bad("obs_dim, action_dim, max_timestep and n_layers must be positive".into());
        }
        Ok(())
    }

    /// Sequence length for a full context window.
    pub fn seq_len(&self) -> usize {
        self.context_length * self.variant.tokens_per_step()
    }
}
