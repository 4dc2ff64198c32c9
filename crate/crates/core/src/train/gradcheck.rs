use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::ContextBatch;
use crate::error::{Error, Result};
use crate::model::{ActionSpace, Model, ModelConfig, Variant};
use crate::tensor::Graph;

/// Central-difference step.
pub const GRAD_CHECK_STEP: f64 = 1e-5;

/// Relative errors are taken against `max(|analytic|, |numeric|, floor)`,
/// so gradients far below the floor are compared in absolute terms.
pub const GRAD_CHECK_DENOM_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub variant: Variant,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_param: String,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "variant={}", self.variant)?;
        writeln!(f, "checked={}", self.checked)?;
        writeln!(f, "max_rel_error={:.3e}", self.max_rel_error)?;
        writeln!(f, "worst_param={}", self.worst_param)?;
        writeln!(f, "tolerance={:.1e}", self.tolerance)?;
        writeln!(f, "passed={}", self.passed())
    }
}

/// Small configuration suitable for finite differences.
pub fn tiny_config(variant: Variant, space: ActionSpace) -> ModelConfig {
    let action_dim = if space == ActionSpace::Discrete { 4 } else { 2 };
    let mut c = ModelConfig::new(variant, 3, action_dim, space);
    c.d_model = 8;
    c.n_layers = 2;
    c.n_heads = 2;
    c.context_length = 3;
    c.max_timestep = 8;
    c.dropout = 0.0;
    c.rtg_scale = 2.0;
    c
}

fn check_batch(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<ContextBatch> {
    let (k, od, ad) = (config.context_length, config.obs_dim, config.action_dim);
    let mut batch = ContextBatch::empty(config.variant, k, od, ad, config.action_space);
    // one full window and one padded window
    for n in [k, (k - 1).max(1)] {
        let obs: Vec<f64> = (0..n * od).map(|_| rng.random_range(-1.0..1.0)).collect();
        let rtgs: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let t0 = rng.random_range(0..config.max_timestep - n + 1);
        let ts: Vec<usize> = (t0..t0 + n).collect();
        match config.action_space {
            ActionSpace::Continuous => {
                let acts: Vec<f64> = (0..n * ad).map(|_| rng.random_range(-0.9..0.9)).collect();
                batch.push_window(&obs, &acts, None, &rtgs, &ts)?;
            }
            ActionSpace::Discrete => {
                let cls: Vec<usize> = (0..n).map(|_| rng.random_range(0..ad)).collect();
                let mut acts = vec![0.0; n * ad];
                for (i, &c) in cls.iter().enumerate() {
                    acts[i * ad + c] = 1.0;
                }
                batch.push_window(&obs, &acts, Some(&cls), &rtgs, &ts)?;
            }
        }
    }
    Ok(batch)
}

fn loss_value(model: &Model<f64>, batch: &ContextBatch) -> Result<f64> {
    let mut fp = model.forward_graph(batch, Graph::inference(), None, false)?;
    let l = model.loss(&mut fp, batch)?;
    Ok(fp.graph.value(l)[0])
}

/// Compares every parameter's analytic gradient of the behavior-cloning
/// loss with central finite differences in 64-bit precision.
///
/// The zero-initialized adaLN projection is randomized first so the check
/// exercises the whole modulation path.
pub fn grad_check_model(config: &ModelConfig, tolerance: f64) -> Result<GradCheckReport> {
    if config.d_model > 16 || config.context_length > 3 {
        return Err(Error::Config("gradient check needs d_model <= 16 and context_length <= 3".into()));
    }
    let mut cfg = config.clone();
    cfg.dropout = 0.0;
    let mut model = Model::<f64>::new(cfg.clone(), 11)?;
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    if let Some(head) = model.params.adaln.as_mut() {
        for t in [&mut head.out.weight, &mut head.out.bias] {
            t.values_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
        }
    }
    let batch = check_batch(&cfg, &mut rng)?;

    let mut fp = model.forward_graph(&batch, Graph::new(), None, false)?;
    let loss = model.loss(&mut fp, &batch)?;
    fp.graph.backward(loss)?;
    model.params.zero_grad();
    model.accumulate_grads(&fp);
    let analytic: Vec<(String, Vec<f64>)> = model
        .params
        .named()
        .into_iter()
        .map(|(n, t)| (n, t.grad().map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec)))
        .collect();

    let mut probe = model.clone();
    let mut worst = (0.0f64, String::new());
    let mut checked = 0;
    for (pi, (name, grads)) in analytic.iter().enumerate() {
        for (j, &a) in grads.iter().enumerate() {
            let orig = probe.params.named()[pi].1.values()[j];
            let set = |p: &mut Model<f64>, v: f64| {
                p.params.named_mut()[pi].1.values_mut()[j] = v;
            };
            set(&mut probe, orig + GRAD_CHECK_STEP);
            let up = loss_value(&probe, &batch)?;
            set(&mut probe, orig - GRAD_CHECK_STEP);
            let down = loss_value(&probe, &batch)?;
            set(&mut probe, orig);
            let numeric = (up - down) / (2.0 * GRAD_CHECK_STEP);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_DENOM_FLOOR);
            if rel > worst.0 || worst.1.is_empty() {
                worst = (rel, format!("{name}[{j}]"));
            }
            checked += 1;
        }
    }
    Ok(GradCheckReport { variant: cfg.variant, checked, max_rel_error: worst.0, worst_param: worst.1, tolerance })
}
