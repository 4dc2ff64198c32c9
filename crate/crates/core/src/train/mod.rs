//! Behavior-cloning training for all variants.

mod gradcheck;

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use gradcheck::{grad_check_model, tiny_config, GradCheckReport, GRAD_CHECK_DENOM_FLOOR, GRAD_CHECK_STEP};

use crate::data::{sample_context_batch, ActionTargets, Dataset};
use crate::envs::EnvKind;
use crate::error::{Error, Result};
use crate::model::{ActionSpace, Model, ModelConfig, Variant};
use crate::tensor::{clip_grad_norm, AdamConfig, AdamState, Graph, Scalar, Var};

/// Masked behavior-cloning loss: MSE for continuous actions, cross-entropy
/// of logits for discrete ones.
pub fn bc_loss<S: Scalar>(
    g: &mut Graph<S>,
    predictions: Var,
    targets: &ActionTargets,
    loss_mask: &[bool],
    space: ActionSpace,
) -> Result<Var> {
    match (targets, space) {
        (ActionTargets::Continuous(t), ActionSpace::Continuous) => {
            g.masked_mse(predictions, t.iter().map(|&v| S::of(v)).collect(), loss_mask.to_vec())
        }
        (ActionTargets::Discrete(t), ActionSpace::Discrete) => g.masked_cross_entropy(predictions, t.clone(), loss_mask.to_vec()),
        _ => Err(Error::InvalidArgument("targets do not match the action space".into())),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub grad_clip: f64,
    pub warmup_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { lr: 1e-4, batch_size: 64, steps: 20_000, seed: 0, grad_clip: 0.25, warmup_steps: 1_000 }
    }
}

impl TrainConfig {
    /// Linear warmup to `lr`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 {
            self.lr
        } else {
            self.lr * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossCurve {
    pub losses: Vec<f64>,
}

impl LossCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            writeln!(s, "{i},{l}").unwrap();
        }
        s
    }

    /// Mean loss over `range` (clamped to the curve).
    pub fn window_mean(&self, range: std::ops::Range<usize>) -> f64 {
        let end = range.end.min(self.losses.len());
        let start = range.start.min(end);
        let w = &self.losses[start..end];
        w.iter().sum::<f64>() / w.len().max(1) as f64
    }
}

/// Small model used by the command-line defaults and the desk-scale runs.
pub fn desk_model_config(env: EnvKind, variant: Variant) -> ModelConfig {
    let mut c = ModelConfig::new(variant, env.obs_dim(), env.action_dim(), env.action_space());
    c.d_model = 16;
    c.n_layers = 1;
    c.n_heads = 2;
    c.dropout = 0.0;
    match env {
        EnvKind::Reacher => {
            c.context_length = 10;
            c.max_timestep = 32;
        }
        EnvKind::Game2048 => {
            c.context_length = 5;
            c.max_timestep = 1024;
        }
    }
    c
}

/// Desk-scale dataset size for each environment.
pub fn desk_episodes(env: EnvKind) -> usize {
    match env {
        EnvKind::Reacher => 2_000,
        EnvKind::Game2048 => 20_000,
    }
}

/// Training defaults per environment: 20k updates on the reacher, 50k on 2048.
pub fn desk_train_config(env: EnvKind) -> TrainConfig {
    let steps = match env {
        EnvKind::Reacher => 20_000,
        EnvKind::Game2048 => 50_000,
    };
    TrainConfig { steps, ..TrainConfig::default() }
}

const BATCH_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;

/// Trains `model` in place for `hyper.steps` Adam updates.
pub fn fit<S: Scalar>(model: &mut Model<S>, dataset: &Dataset, hyper: &TrainConfig) -> Result<LossCurve> {
    let cfg = model.config.clone();
    if dataset.obs_dim() != cfg.obs_dim || dataset.action_dim() != cfg.action_dim || dataset.action_space() != cfg.action_space {
        return Err(Error::EnvMismatch(format!(
            "dataset has obs_dim {} / action_dim {}, model expects {} / {}",
            dataset.obs_dim(),
            dataset.action_dim(),
            cfg.obs_dim,
            cfg.action_dim
        )));
    }
    let mut batch_rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    batch_rng.set_stream(BATCH_STREAM);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    drop_rng.set_stream(DROPOUT_STREAM);
    let mut adam = AdamState::new(AdamConfig { lr: hyper.lr, ..Default::default() }, model.params.named().into_iter().map(|(_, t)| t));
    let mut curve = LossCurve::default();
    for step in 0..hyper.steps {
        let batch = sample_context_batch(dataset, cfg.context_length, hyper.batch_size, &mut batch_rng, cfg.rtg_scale, cfg.variant)?;
        let mut fp = model.forward_graph(&batch, Graph::new(), Some(&mut drop_rng), false)?;
        let loss = model.loss(&mut fp, &batch)?;
        let value = fp.graph.value(loss)[0].to_f64_lossy();
        if !value.is_finite() {
            return Err(Error::Diverged(step));
        }
        fp.graph.backward(loss)?;
        model.params.zero_grad();
        model.accumulate_grads(&fp);
        let mut named = model.params.named_mut();
        if hyper.grad_clip > 0.0 {
            clip_grad_norm(&mut named, hyper.grad_clip);
        }
        adam.config.lr = hyper.lr_at(step);
        adam.step(&mut named).map_err(|e| {
            log::error!("step {step}: {e}");
            Error::Diverged(step)
        })?;
        curve.losses.push(value);
        if (step + 1) % 1000 == 0 {
            log::info!("{} step {}: loss {:.5}", cfg.variant, step + 1, curve.window_mean(step + 1 - 100..step + 1));
        }
    }
    Ok(curve)
}

/// Initializes a model from `hyper.seed` and trains it.
pub fn train_run(dataset: &Dataset, config: &ModelConfig, hyper: &TrainConfig) -> Result<(Model<f32>, LossCurve)> {
    let mut model = Model::<f32>::new(config.clone(), hyper.seed)?;
    let curve = fit(&mut model, dataset, hyper)?;
    Ok((model, curve))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn loss_of(pred: Vec<f64>, shape: Vec<usize>, targets: ActionTargets, mask: Vec<bool>, space: ActionSpace) -> Result<f64> {
        let mut g = Graph::<f64>::new();
        let p = g.constant(shape, pred)?;
        let l = bc_loss(&mut g, p, &targets, &mask, space)?;
        Ok(g.value(l)[0])
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let v = vec![0.1, -0.5, 0.3, 0.9];
        let l = loss_of(v.clone(), vec![2, 2], ActionTargets::Continuous(v), vec![true, true], ActionSpace::Continuous).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn uniform_logits_give_ln4() {
        for target in 0..4 {
            let l = loss_of(vec![0.0; 4], vec![1, 4], ActionTargets::Discrete(vec![target]), vec![true], ActionSpace::Discrete).unwrap();
            assert!((l - 4f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_loss_equals_subset_loss() {
        let pred = vec![0.1, 0.2, -0.3, 0.4, 0.5, -0.6, 0.7, 0.8];
        let tgt = vec![0.0, 0.1, 0.2, 0.3, -0.4, 0.5, 0.6, 0.7];
        let mask = vec![false, true, false, true];
        let masked = loss_of(pred.clone(), vec![4, 2], ActionTargets::Continuous(tgt.clone()), mask, ActionSpace::Continuous).unwrap();
        let sub_p = [&pred[2..4], &pred[6..8]].concat();
        let sub_t = [&tgt[2..4], &tgt[6..8]].concat();
        let oracle: f64 = sub_p.iter().zip(&sub_t).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 4.0;
        assert!((masked - oracle).abs() < 1e-15);

        let logits = vec![1.0, 0.0, -1.0, 0.5, 2.0, 0.1];
        let masked = loss_of(logits.clone(), vec![2, 3], ActionTargets::Discrete(vec![2, 0]), vec![false, true], ActionSpace::Discrete).unwrap();
        let row = &logits[3..6];
        let lse = row.iter().map(|v| f64::exp(*v)).sum::<f64>().ln();
        assert!((masked - (lse - row[0])).abs() < 1e-12);
    }

    #[test]
    fn all_masked_rejected() {
        let r = loss_of(vec![0.0; 2], vec![2, 1], ActionTargets::Continuous(vec![0.0; 2]), vec![false, false], ActionSpace::Continuous);
        assert!(matches!(r, Err(Error::AllMasked)));
    }

    #[test]
    fn warmup_schedule() {
        let h = TrainConfig { lr: 1e-3, warmup_steps: 10, ..Default::default() };
        assert!((h.lr_at(0) - 1e-4).abs() < 1e-15);
        assert_eq!(h.lr_at(9), 1e-3);
        assert_eq!(h.lr_at(500), 1e-3);
    }
}
