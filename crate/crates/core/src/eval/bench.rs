use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{Action, ActionSpace, History, Model, ModelConfig, Variant};

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub variant: Variant,
    pub k: usize,
    pub tokens: usize,
    /// Attention scores per head per layer.
    pub attn_elements: usize,
    /// Attention elements relative to DT at the same `k`.
    pub element_ratio: f64,
    pub median_secs: f64,
    /// Median wall-clock relative to DT at the same `k`.
    pub time_ratio: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BenchTable {
    pub rows: Vec<BenchRow>,
}

impl BenchTable {
    pub fn row(&self, variant: Variant, k: usize) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.variant == variant && r.k == k)
    }

    /// Size columns only, identical across runs.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,k,tokens,attn_elements,element_ratio\n");
        for r in &self.rows {
            writeln!(s, "{},{},{},{},{:.6}", r.variant, r.k, r.tokens, r.attn_elements, r.element_ratio).unwrap();
        }
        s
    }

    pub fn timing_csv(&self) -> String {
        let mut s = String::from("variant,k,median_ms,time_ratio\n");
        for r in &self.rows {
            writeln!(s, "{},{},{:.4},{:.4}", r.variant, r.k, r.median_secs * 1e3, r.time_ratio).unwrap();
        }
        s
    }
}

fn full_history(config: &ModelConfig, rng: &mut ChaCha8Rng) -> History {
    let k = config.context_length;
    let mut h = History::default();
    for t in 0..k {
        h.push((0..config.obs_dim).map(|_| rng.random_range(-1.0..1.0)).collect(), t);
        if t + 1 < k {
            h.actions.push(match config.action_space {
                ActionSpace::Continuous => Action::Continuous((0..config.action_dim).map(|_| rng.random_range(-1.0..1.0)).collect()),
                ActionSpace::Discrete => Action::Discrete(rng.random_range(0..config.action_dim)),
            });
            h.past_rtgs.push(rng.random_range(-1.0..1.0));
        }
    }
    h
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Times `predict_action` for every variant at every context length, using
/// `base` for all other dimensions. One warmup call precedes the trials, and
/// trials cycle through the variants so machine drift hits all of them alike.
pub fn bench_inference(base: &ModelConfig, k_values: &[usize], trials: usize, seed: u64) -> Result<BenchTable> {
    if trials < 3 {
        return Err(Error::InvalidArgument(format!("bench needs at least 3 trials, got {trials}")));
    }
    if k_values.is_empty() {
        return Err(Error::Empty("k values"));
    }
    let mut table = BenchTable::default();
    for &k in k_values {
        let mut runs = Vec::new();
        for variant in Variant::ALL {
            let mut cfg = base.clone();
            cfg.variant = variant;
            cfg.context_length = k;
            cfg.max_timestep = cfg.max_timestep.max(k);
            cfg.dropout = 0.0;
            let model = Model::<f32>::new(cfg.clone(), seed)?;
            let history = full_history(&cfg, &mut ChaCha8Rng::seed_from_u64(seed));
            model.predict_action(&history, 0.5)?;
            runs.push((cfg, model, history, Vec::with_capacity(trials)));
        }
        for _ in 0..trials {
            for (_, model, history, times) in &mut runs {
                let start = Instant::now();
                std::hint::black_box(model.predict_action(std::hint::black_box(&*history), 0.5)?);
                times.push(start.elapsed().as_secs_f64());
            }
        }
        let mut dt = (0, 0.0);
        for (cfg, _, _, times) in runs {
            let tokens = cfg.seq_len();
            let elements = tokens * tokens;
            let median_secs = median(times);
            if cfg.variant == Variant::Dt {
                dt = (elements, median_secs);
            }
            table.rows.push(BenchRow {
                variant: cfg.variant,
                k,
                tokens,
                attn_elements: elements,
                element_ratio: elements as f64 / dt.0 as f64,
                median_secs,
                time_ratio: median_secs / dt.1,
            });
        }
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_counts_and_ratio() {
        let mut c = ModelConfig::new(Variant::Dt, 1, 1, ActionSpace::Continuous);
        c.d_model = 8;
        c.n_heads = 2;
        c.n_layers = 1;
        let t = bench_inference(&c, &[1, 7, 30], 3, 0).unwrap();
        for k in [1, 7, 30] {
            assert_eq!(t.row(Variant::Dt, k).unwrap().tokens, 3 * k);
            assert_eq!(t.row(Variant::BlockedDt, k).unwrap().tokens, 3 * k);
            let d = t.row(Variant::Ddt, k).unwrap();
            assert_eq!(d.tokens, 2 * k);
            assert_eq!(d.element_ratio, 4.0 / 9.0);
        }
        assert!(t.to_csv().contains("ddt,30,60,3600,0.444444"));
        assert!(bench_inference(&c, &[3], 2, 0).is_err());
    }
}
