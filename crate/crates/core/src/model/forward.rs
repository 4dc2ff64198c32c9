use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::mask::{build_attention_mask, token_layout, Modality};
use super::params::{AdaLnHead, LayerNormAffine, Linear, Parameters};
use super::{Action, ActionSpace, ModelConfig, LAYER_NORM_EPS};
use crate::data::{ActionTargets, ContextBatch};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// A policy network: configuration plus trainable parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<S: Scalar> {
    pub config: ModelConfig,
    pub params: Parameters<Tensor<S>>,
}

/// Recorded forward pass. `predictions` is `[B·k, action_dim]`: tanh outputs
/// for continuous actions, raw logits for discrete ones.
pub struct ForwardPass<S: Scalar> {
    pub graph: Graph<S>,
    pub predictions: Var,
    pub params: Parameters<Var>,
    /// One attention node per block.
    pub attention: Vec<Var>,
    /// Scaled return inputs `[B·k, 1]`.
    pub rtg_input: Var,
    /// Return-token embeddings `[B·k, d]` (RTG-token variants only).
    pub rtg_tokens: Option<Var>,
}

/// Context for one action prediction, oldest step first.
///
/// `obs` holds `n` observations ending at the current step; `actions` and
/// `past_rtgs` hold the `n − 1` preceding actions and returns-to-go.
/// `past_rtgs` is ignored by the decoupled variant.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub obs: Vec<Vec<f64>>,
    pub actions: Vec<Action>,
    pub past_rtgs: Vec<f64>,
    pub timesteps: Vec<usize>,
}

impl History {
    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    /// Appends the current step after its action has been taken.
    pub fn push(&mut self, obs: Vec<f64>, timestep: usize) {
        self.obs.push(obs);
        self.timesteps.push(timestep);
    }

    /// Drops the oldest steps so at most `k` observations remain.
    pub fn truncate_front(&mut self, k: usize) {
        let n = self.obs.len();
        if n > k {
            let drop = n - k;
            self.obs.drain(..drop);
            self.timesteps.drain(..drop);
            self.actions.drain(..drop.min(self.actions.len()));
            self.past_rtgs.drain(..drop.min(self.past_rtgs.len()));
        }
    }
}

/// Post-softmax attention of one forward pass, `layer → head → seq × seq`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMatrices {
    pub seq: usize,
    pub layers: Vec<Vec<Vec<f64>>>,
    pub tokens: Vec<(Modality, usize)>,
}

fn linear<S: Scalar>(g: &mut Graph<S>, x: Var, l: &Linear<Var>) -> Result<Var> {
    g.linear(x, l.weight, l.bias)
}

fn layer_norm_affine<S: Scalar>(g: &mut Graph<S>, x: Var, ln: &LayerNormAffine<Var>) -> Result<Var> {
    let n = g.layer_norm(x, S::of(LAYER_NORM_EPS))?;
    let s = g.mul_last_dim(n, ln.gain)?;
    g.add_bias(s, ln.shift)
}

fn dropout<S: Scalar>(g: &mut Graph<S>, x: Var, rate: f64, rng: &mut Option<&mut ChaCha8Rng>) -> Result<Var> {
    match rng {
        Some(r) if rate > 0.0 => {
            let keep: Vec<bool> = (0..g.value(x).len()).map(|_| r.random::<f64>() >= rate).collect();
            g.dropout(x, &keep, S::of(rate))
        }
        _ => Ok(x),
    }
}

fn adaln_head<S: Scalar>(g: &mut Graph<S>, z: Var, head: &AdaLnHead<Var>) -> Result<Var> {
    let mut h = z;
    if let Some(hidden) = &head.hidden {
        let pre = linear(g, h, hidden)?;
        h = g.relu(pre);
    }
    linear(g, h, &head.out)
}

impl<S: Scalar> Model<S> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = Parameters::init(&config, seed);
        Ok(Model { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: Parameters<Tensor<S>>) -> Result<Self> {
        config.validate()?;
        Ok(Model { config, params })
    }

    pub fn cast<T: Scalar>(&self) -> Model<T> {
        Model { config: self.config.clone(), params: self.params.cast() }
    }

    /// Records the full forward pass into `graph`.
    ///
    /// Dropout is active only when `rng` is given. With `rtg_grad` the
    /// scaled return inputs become a differentiable leaf.
    pub fn forward_graph(
        &self,
        batch: &ContextBatch,
        mut graph: Graph<S>,
        mut rng: Option<&mut ChaCha8Rng>,
        rtg_grad: bool,
    ) -> Result<ForwardPass<S>> {
        let cfg = &self.config;
        self.check_batch(batch)?;
        let g = &mut graph;
        let pv = self.params.map(&mut |_, t| g.leaf(t));
        let (b, k) = (batch.batch_size, batch.k);
        let n = b * k;
        let conv = |v: &[f64]| v.iter().map(|&x| S::of(x)).collect::<Vec<S>>();

        let obs = g.constant(vec![n, cfg.obs_dim], conv(&batch.obs))?;
        let act = g.constant(vec![n, cfg.action_dim], conv(&batch.actions))?;
        let rtg_t = Tensor::new(vec![n, 1], conv(&batch.rtgs))?;
        let rtg_input = g.leaf(&if rtg_grad { rtg_t.with_grad() } else { rtg_t });

        let time = g.gather_rows(pv.embed_timestep, batch.timesteps.clone())?;
        let o = linear(g, obs, &pv.embed_obs)?;
        let o = g.add(o, time)?;
        let a = linear(g, act, &pv.embed_action)?;
        let a = g.add(a, time)?;
        let (parts, rtg_tokens) = match &pv.embed_rtg {
            Some(er) => {
                let r = linear(g, rtg_input, er)?;
                let r = g.add(r, time)?;
                (vec![r, o, a], Some(r))
            }
            None => (vec![o, a], None),
        };
        let m = parts.len();
        let seq = k * m;
        let stacked = g.concat_rows(&parts)?;
        // sample-major, timestep-major, modality-minor
        let order: Vec<usize> = (0..b)
            .flat_map(|bi| (0..k).flat_map(move |t| (0..m).map(move |mi| mi * n + bi * k + t)))
            .collect();
        let mut x = g.gather_rows(stacked, order)?;
        x = layer_norm_affine(g, x, &pv.embed_ln)?;
        x = dropout(g, x, cfg.dropout, &mut rng)?;

        let mask: Rc<[bool]> = build_attention_mask(cfg.variant, k).allowed.into();
        let key_valid: Rc<[bool]> = batch
            .loss_mask
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, m))
            .collect();
        let mut attention = Vec::with_capacity(pv.blocks.len());
        for blk in &pv.blocks {
            let h = layer_norm_affine(g, x, &blk.ln1)?;
            let q = linear(g, h, &blk.query)?;
            let kk = linear(g, h, &blk.key)?;
            let v = linear(g, h, &blk.value)?;
            let att = g.attention(q, kk, v, b, seq, cfg.n_heads, mask.clone(), key_valid.clone())?;
            attention.push(att);
            let p = linear(g, att, &blk.proj)?;
            let p = dropout(g, p, cfg.dropout, &mut rng)?;
            x = g.add(x, p)?;
            let h = layer_norm_affine(g, x, &blk.ln2)?;
            let f = linear(g, h, &blk.fc)?;
            let f = g.gelu(f);
            let f = linear(g, f, &blk.fc_out)?;
            let f = dropout(g, f, cfg.dropout, &mut rng)?;
            x = g.add(x, f)?;
        }

        // observation-token hidden states predict each timestep's action
        let obs_slot = token_layout(cfg.variant).iter().position(|&t| t == Modality::Obs).expect("obs token");
        let rows: Vec<usize> = (0..b).flat_map(|bi| (0..k).map(move |t| bi * seq + t * m + obs_slot)).collect();
        let hs = g.gather_rows(x, rows)?;
        let h = match (&pv.ln_f, &pv.adaln) {
            (_, Some(head)) => {
                let xn = g.layer_norm(hs, S::of(LAYER_NORM_EPS))?;
                let gb = adaln_head(g, rtg_input, head)?;
                g.modulate(xn, gb)?
            }
            (Some(ln), None) => layer_norm_affine(g, hs, ln)?,
            (None, None) => unreachable!("parameters without a final normalization"),
        };
        let mut out = linear(g, h, &pv.predict_action)?;
        if cfg.action_space == ActionSpace::Continuous {
            out = g.tanh(out);
        }
        debug_assert_eq!(g.shape(out), &[n, cfg.action_dim]);
        Ok(ForwardPass { graph, predictions: out, params: pv, attention, rtg_input, rtg_tokens })
    }

    fn check_batch(&self, batch: &ContextBatch) -> Result<()> {
        let cfg = &self.config;
        if batch.variant != cfg.variant {
            return Err(Error::VariantMismatch { batch: batch.variant.to_string(), model: cfg.variant.to_string() });
        }
        if batch.obs_dim != cfg.obs_dim || batch.action_dim != cfg.action_dim || batch.action_space() != cfg.action_space {
            return Err(Error::InvalidArgument(format!(
                "batch dims (obs {}, action {}) do not match model (obs {}, action {})",
                batch.obs_dim, batch.action_dim, cfg.obs_dim, cfg.action_dim
            )));
        }
        if batch.k != cfg.context_length {
            return Err(Error::InvalidArgument(format!(
                "batch context {} differs from model context {}",
                batch.k, cfg.context_length
            )));
        }
        if batch.batch_size == 0 {
            return Err(Error::Empty("batch"));
        }
        if let Some(&t) = batch.timesteps.iter().find(|&&t| t >= cfg.max_timestep) {
            return Err(Error::TimestepOutOfRange { timestep: t, max: cfg.max_timestep });
        }
        Ok(())
    }

    /// Deterministic (dropout-free) predictions for every timestep,
    /// row-major `[B·k, action_dim]`.
    pub fn forward_train(&self, batch: &ContextBatch) -> Result<Vec<S>> {
        let fp = self.forward_graph(batch, Graph::inference(), None, false)?;
        Ok(fp.graph.value(fp.predictions).to_vec())
    }

    /// Builds the padded single-window batch used for prediction.
    pub fn history_batch(&self, history: &History, rtg_t: f64) -> Result<ContextBatch> {
        let cfg = &self.config;
        let n = history.obs.len();
        if n == 0 {
            return Err(Error::EmptyHistory);
        }
        if history.timesteps.len() != n || history.actions.len() + 1 != n {
            return Err(Error::History(format!(
                "{n} observations need {} actions and {n} timesteps, got {} and {}",
                n - 1,
                history.actions.len(),
                history.timesteps.len()
            )));
        }
        if cfg.variant.uses_rtg_tokens() && history.past_rtgs.len() + 1 != n {
            return Err(Error::History(format!("{} needs {} past returns-to-go, got {}", cfg.variant, n - 1, history.past_rtgs.len())));
        }
        let start = n.saturating_sub(cfg.context_length);
        let mut obs = Vec::new();
        for o in &history.obs[start..] {
            if o.len() != cfg.obs_dim {
                return Err(Error::History(format!("observation of width {} for obs_dim {}", o.len(), cfg.obs_dim)));
            }
            obs.extend_from_slice(o);
        }
        let mut acts = Vec::new();
        let mut classes = Vec::new();
        for a in &history.actions[start..] {
            match (a, cfg.action_space) {
                (Action::Continuous(v), ActionSpace::Continuous) if v.len() == cfg.action_dim => {}
                (Action::Discrete(i), ActionSpace::Discrete) if *i < cfg.action_dim => classes.push(*i),
                _ => return Err(Error::History(format!("action {a:?} does not fit the model's action space"))),
            }
            acts.extend(a.encode(cfg.action_dim));
        }
        // the current action is unknown
        acts.extend(std::iter::repeat_n(0.0, cfg.action_dim));
        classes.push(0);
        let mut rtgs: Vec<f64> = if cfg.variant.uses_rtg_tokens() {
            history.past_rtgs[start..].iter().map(|r| r / cfg.rtg_scale).collect()
        } else {
            vec![0.0; n - 1 - start]
        };
        rtgs.push(rtg_t / cfg.rtg_scale);
        let mut batch = ContextBatch::empty(cfg.variant, cfg.context_length, cfg.obs_dim, cfg.action_dim, cfg.action_space);
        let cls = (cfg.action_space == ActionSpace::Discrete).then_some(classes.as_slice());
        batch.push_window(&obs, &acts, cls, &rtgs, &history.timesteps[start..])?;
        Ok(batch)
    }

    /// Raw head output for the current step (tanh outputs or logits).
    pub fn predict_raw(&self, history: &History, rtg_t: f64) -> Result<Vec<S>> {
        let batch = self.history_batch(history, rtg_t)?;
        let out = self.forward_train(&batch)?;
        let ad = self.config.action_dim;
        Ok(out[out.len() - ad..].to_vec())
    }

    /// Action for the current step given the latest return-to-go `rtg_t`
    /// (unscaled). Discrete ties go to the lowest index.
    pub fn predict_action(&self, history: &History, rtg_t: f64) -> Result<Action> {
        let raw = self.predict_raw(history, rtg_t)?;
        Ok(match self.config.action_space {
            ActionSpace::Continuous => Action::Continuous(raw.iter().map(|v| v.to_f64_lossy()).collect()),
            ActionSpace::Discrete => Action::Discrete(argmax(&raw, |_| true).expect("non-empty logits")),
        })
    }

    /// Per-layer, per-head attention weights of the prediction forward pass.
    pub fn extract_attention(&self, history: &History, rtg_t: f64) -> Result<AttentionMatrices> {
        Ok(self.predict_with_attention(history, rtg_t)?.1)
    }

    /// Raw head output together with the attention weights of the same pass.
    pub fn predict_with_attention(&self, history: &History, rtg_t: f64) -> Result<(Vec<S>, AttentionMatrices)> {
        let batch = self.history_batch(history, rtg_t)?;
        let fp = self.forward_graph(&batch, Graph::inference(), None, false)?;
        let mut layers = Vec::new();
        let mut seq = 0;
        for &a in &fp.attention {
            let (p, [_, heads, s, _]) = fp.graph.attention_probs(a).expect("attention node");
            seq = s;
            layers.push((0..heads).map(|h| p[h * s * s..(h + 1) * s * s].iter().map(|v| v.to_f64_lossy()).collect()).collect());
        }
        let out = fp.graph.value(fp.predictions);
        let raw = out[out.len() - self.config.action_dim..].to_vec();
        let tokens = build_attention_mask(self.config.variant, self.config.context_length).tokens;
        Ok((raw, AttentionMatrices { seq, layers, tokens }))
    }

    /// Adaptive layer norm of one hidden vector under scaled return `z`.
    pub fn adaln(&self, x: &[S], z: S) -> Result<Vec<S>> {
        let head = self.params.adaln.as_ref().ok_or_else(|| Error::Config(format!("{} has no adaLN head", self.config.variant)))?;
        let mut g = Graph::inference();
        let hv = AdaLnHead {
            hidden: head.hidden.as_ref().map(|l| Linear { weight: g.leaf(&l.weight), bias: g.leaf(&l.bias) }),
            out: Linear { weight: g.leaf(&head.out.weight), bias: g.leaf(&head.out.bias) },
        };
        let xv = g.constant(vec![1, x.len()], x.to_vec())?;
        let zv = g.constant(vec![1, 1], vec![z])?;
        let xn = g.layer_norm(xv, S::of(LAYER_NORM_EPS))?;
        let gb = adaln_head(&mut g, zv, &hv)?;
        let out = g.modulate(xn, gb)?;
        Ok(g.value(out).to_vec())
    }

    /// Masked behavior-cloning loss of a recorded forward pass.
    pub fn loss(&self, fp: &mut ForwardPass<S>, batch: &ContextBatch) -> Result<Var> {
        crate::train::bc_loss(&mut fp.graph, fp.predictions, &batch.targets, &batch.loss_mask, self.config.action_space)
    }

    /// Hands the gradients of a finished backward pass to the parameters.
    pub fn accumulate_grads(&mut self, fp: &ForwardPass<S>) {
        let vars = fp.params.named();
        for ((_, t), (_, v)) in self.params.named_mut().into_iter().zip(vars) {
            fp.graph.accumulate_into(*v, t);
        }
    }

    /// Whether the variant is trained against `targets`.
    pub fn targets_match(&self, targets: &ActionTargets) -> bool {
        matches!(
            (targets, self.config.action_space),
            (ActionTargets::Continuous(_), ActionSpace::Continuous) | (ActionTargets::Discrete(_), ActionSpace::Discrete)
        )
    }
}

/// Index of the largest value among `allowed` entries; lowest index wins ties.
pub(crate) fn argmax<S: Scalar>(v: &[S], allowed: impl Fn(usize) -> bool) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &x) in v.iter().enumerate() {
        if allowed(i) && best.is_none_or(|b| x > v[b]) {
            best = Some(i);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ActionSpace, Variant};

    fn tiny(variant: Variant) -> ModelConfig {
        let mut c = ModelConfig::new(variant, 2, 3, ActionSpace::Continuous);
        c.d_model = 8;
        c.n_layers = 2;
        c.n_heads = 2;
        c.context_length = 3;
        c.max_timestep = 16;
        c.dropout = 0.0;
        c.rtg_scale = 5.0;
        c
    }

    fn history(n: usize) -> History {
        History {
            obs: (0..n).map(|t| vec![0.1 * t as f64, -0.2 * t as f64 + 0.3]).collect(),
            actions: (0..n.saturating_sub(1)).map(|t| Action::Continuous(vec![0.5, -0.1 * t as f64, 0.2])).collect(),
            past_rtgs: (0..n.saturating_sub(1)).map(|t| 4.0 - t as f64).collect(),
            timesteps: (3..3 + n).collect(),
        }
    }

    #[test]
    fn shapes_and_ranges() {
        for v in Variant::ALL {
            let m = Model::<f64>::new(tiny(v), 0).unwrap();
            let raw = m.predict_raw(&history(2), 1.0).unwrap();
            assert_eq!(raw.len(), 3);
            assert!(raw.iter().all(|x| x.abs() <= 1.0));
            let att = m.extract_attention(&history(3), 1.0).unwrap();
            assert_eq!(att.seq, 3 * v.tokens_per_step());
            assert_eq!(att.layers.len(), 2);
            assert_eq!(att.layers[0].len(), 2);
        }
    }

    #[test]
    fn errors() {
        let m = Model::<f64>::new(tiny(Variant::Dt), 0).unwrap();
        assert!(matches!(m.predict_raw(&History::default(), 0.0), Err(Error::EmptyHistory)));
        let mut h = history(2);
        h.timesteps = vec![15, 16];
        assert!(matches!(m.predict_raw(&h, 0.0), Err(Error::TimestepOutOfRange { timestep: 16, max: 16 })));
        let batch = m.history_batch(&history(2), 0.0).unwrap();
        let other = Model::<f64>::new(tiny(Variant::Ddt), 0).unwrap();
        assert!(matches!(other.forward_train(&batch), Err(Error::VariantMismatch { .. })));
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0f32, 3.0, 3.0, 0.0], |_| true), Some(1));
        assert_eq!(argmax(&[1.0f32, 3.0, 3.0, 0.0], |i| i != 1), Some(2));
        assert_eq!(argmax::<f32>(&[], |_| true), None);
    }

    #[test]
    fn history_longer_than_context_is_truncated() {
        let m = Model::<f64>::new(tiny(Variant::Dt), 0).unwrap();
        let long = history(5);
        let mut short = long.clone();
        short.truncate_front(3);
        assert_eq!(m.predict_raw(&long, 2.0).unwrap(), m.predict_raw(&short, 2.0).unwrap());
    }
}
