use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::run_episode_with;
use crate::envs::{episode_seed, EnvKind};
use crate::error::{Error, Result};
use crate::model::{Modality, Model, Variant};
use crate::tensor::Scalar;

/// Attention weights averaged over full-window predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub variant: Variant,
    pub size: usize,
    /// `layer → head → size × size` running means (row = query).
    pub layers: Vec<Vec<Vec<f64>>>,
    pub samples: usize,
    /// `(modality, timestep)` of each token; timestep 0 is the oldest.
    pub tokens: Vec<(Modality, usize)>,
}

impl AttentionMap {
    pub fn heads(&self) -> usize {
        self.layers.first().map_or(0, Vec::len)
    }

    /// Axis labels such as `o-2` or `R0`, relative to the current step.
    pub fn labels(&self) -> Vec<String> {
        let last = self.tokens.iter().map(|t| t.1).max().unwrap_or(0) as i64;
        self.tokens.iter().map(|&(m, t)| format!("{}{}", m.label(), t as i64 - last)).collect()
    }

    pub fn get(&self, layer: usize, head: usize, q: usize, k: usize) -> f64 {
        self.layers[layer][head][q * self.size + k]
    }

    /// Mean over layers, heads and query rows of the attention mass on keys
    /// at most `radius` timesteps from the query's timestep.
    pub fn diagonal_mass(&self, radius: usize) -> f64 {
        let mut total = 0.0;
        let mut rows = 0usize;
        for layer in &self.layers {
            for m in layer {
                for q in 0..self.size {
                    let tq = self.tokens[q].1;
                    total += (0..self.size).filter(|&k| self.tokens[k].1.abs_diff(tq) <= radius).map(|k| m[q * self.size + k]).sum::<f64>();
                    rows += 1;
                }
            }
        }
        total / rows.max(1) as f64
    }

    pub fn to_csv(&self, layer: usize, head: usize) -> String {
        let labels = self.labels();
        let mut s = format!("query,{}\n", labels.join(","));
        for (q, label) in labels.iter().enumerate() {
            s.push_str(label);
            for k in 0..self.size {
                write!(s, ",{:.8}", self.get(layer, head, q, k)).unwrap();
            }
            s.push('\n');
        }
        s
    }

    /// Binary 8-bit grayscale image, the matrix maximum mapped to 255.
    pub fn to_pgm(&self, layer: usize, head: usize) -> Vec<u8> {
        let m = &self.layers[layer][head];
        let max = m.iter().copied().fold(0.0, f64::max);
        let mut out = format!("P5\n{} {}\n255\n", self.size, self.size).into_bytes();
        out.extend(m.iter().map(|&v| if max > 0.0 { (v / max * 255.0).round().clamp(0.0, 255.0) as u8 } else { 0 }));
        out
    }

    /// Writes `attn_l{layer}_h{head}.csv` and `.pgm` for every head.
    pub fn export(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        if self.samples == 0 {
            return Err(Error::Empty("attention map"));
        }
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut written = Vec::new();
        for l in 0..self.layers.len() {
            for h in 0..self.heads() {
                let csv = dir.join(format!("attn_l{l}_h{h}.csv"));
                fs::write(&csv, self.to_csv(l, h)).map_err(|e| Error::io(&csv, e))?;
                let pgm = dir.join(format!("attn_l{l}_h{h}.pgm"));
                fs::write(&pgm, self.to_pgm(l, h)).map_err(|e| Error::io(&pgm, e))?;
                written.extend([csv, pgm]);
            }
        }
        Ok(written)
    }
}

/// Rolls out conditioned episodes and averages the attention weights of the
/// first `steps` predictions made with a full context window.
pub fn attention_report<S: Scalar>(model: &Model<S>, env: EnvKind, steps: usize, seed: u64, target_rtg: f64) -> Result<AttentionMap> {
    if steps == 0 {
        return Err(Error::InvalidArgument("steps must be >= 1".into()));
    }
    let k = model.config.context_length;
    let size = model.config.seq_len();
    let n_heads = model.config.n_heads;
    let mut sums = vec![vec![vec![0.0; size * size]; n_heads]; model.config.n_layers];
    let mut samples = 0;
    let mut tokens = Vec::new();
    let mut episode = 0;
    while samples < steps {
        let mut e = env.make(episode_seed(seed, episode));
        run_episode_with(model, &mut e, target_rtg, |history, rtg| {
            if history.len() < k || samples >= steps {
                return Ok(());
            }
            let a = model.extract_attention(history, rtg)?;
            for (acc_l, l) in sums.iter_mut().zip(&a.layers) {
                for (acc, h) in acc_l.iter_mut().zip(l) {
                    acc.iter_mut().zip(h).for_each(|(s, v)| *s += v);
                }
            }
            tokens = a.tokens;
            samples += 1;
            Ok(())
        })?;
        episode += 1;
        if samples == 0 && episode >= 16 {
            return Err(Error::InvalidArgument(format!("episodes never fill a context window of {k} steps")));
        }
    }
    let n = samples as f64;
    for m in sums.iter_mut().flatten() {
        m.iter_mut().for_each(|v| *v /= n);
    }
    Ok(AttentionMap { variant: model.config.variant, size, layers: sums, samples, tokens })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ActionSpace, ModelConfig};

    fn model(v: Variant) -> Model<f32> {
        let mut c = ModelConfig::new(v, 1, 1, ActionSpace::Continuous);
        c.d_model = 8;
        c.n_heads = 2;
        c.n_layers = 2;
        c.context_length = 4;
        c.max_timestep = 32;
        Model::new(c, 1).unwrap()
    }

    #[test]
    fn averaged_rows_are_stochastic_and_causal() {
        for v in Variant::ALL {
            let map = attention_report(&model(v), EnvKind::Reacher, 25, 3, -5.0).unwrap();
            assert_eq!(map.samples, 25);
            assert_eq!(map.size, 4 * v.tokens_per_step());
            for l in 0..2 {
                for h in 0..2 {
                    for q in 0..map.size {
                        let row: f64 = (0..map.size).map(|k| map.get(l, h, q, k)).sum();
                        assert!((row - 1.0).abs() < 1e-4);
                        for k in q + 1..map.size {
                            assert_eq!(map.get(l, h, q, k), 0.0);
                        }
                    }
                }
            }
            let m = map.diagonal_mass(1);
            assert!(m > 0.0 && m <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn export_writes_csv_and_pgm() {
        let map = attention_report(&model(Variant::Ddt), EnvKind::Reacher, 3, 0, -5.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = map.export(dir.path()).unwrap();
        assert_eq!(files.len(), 8);
        let pgm = fs::read(dir.path().join("attn_l0_h0.pgm")).unwrap();
        assert!(pgm.starts_with(b"P5\n8 8\n255\n"));
        assert_eq!(pgm.len(), "P5\n8 8\n255\n".len() + 64);
        assert!(pgm.contains(&255));
        let csv = fs::read_to_string(dir.path().join("attn_l0_h0.csv")).unwrap();
        assert!(csv.starts_with("query,o-3,a-3,o-2"));
    }
}
