use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::envs::EnvKind;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Variant};
use crate::train::{desk_model_config, desk_train_config, TrainConfig};

/// Parses `key = value` lines; `#` starts a comment. Later keys win.
pub fn parse_key_values(path: &Path, text: &str) -> Result<BTreeMap<String, (usize, String)>> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            field: line.to_string(),
            message: "expected key=value".into(),
        })?;
        map.insert(k.trim().to_string(), (i + 1, v.trim().to_string()));
    }
    Ok(map)
}

/// Model and optimizer settings of one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn desk(env: EnvKind, variant: Variant) -> Self {
        RunConfig { model: desk_model_config(env, variant), train: desk_train_config(env) }
    }

    pub fn apply(&mut self, values: &BTreeMap<String, (usize, String)>) -> Result<()> {
        fn set<T: FromStr>(slot: &mut T, key: &str, line: usize, v: &str) -> Result<()> {
            *slot = v.parse().map_err(|_| Error::Parse {
                path: "<config>".into(),
                line,
                field: key.to_string(),
                message: format!("cannot parse `{v}`"),
            })?;
            Ok(())
        }
        let (m, t) = (&mut self.model, &mut self.train);
        for (key, (line, v)) in values {
            let line = *line;
            match key.as_str() {
                "d_model" => set(&mut m.d_model, key, line, v)?,
                "n_layers" => set(&mut m.n_layers, key, line, v)?,
                "n_heads" => set(&mut m.n_heads, key, line, v)?,
                "context_length" => set(&mut m.context_length, key, line, v)?,
                "max_timestep" => set(&mut m.max_timestep, key, line, v)?,
                "adaln_depth" => set(&mut m.adaln_depth, key, line, v)?,
                "dropout" => set(&mut m.dropout, key, line, v)?,
                "rtg_scale" => set(&mut m.rtg_scale, key, line, v)?,
                "lr" => set(&mut t.lr, key, line, v)?,
                "batch_size" => set(&mut t.batch_size, key, line, v)?,
                "steps" => set(&mut t.steps, key, line, v)?,
                "seed" => set(&mut t.seed, key, line, v)?,
                "grad_clip" => set(&mut t.grad_clip, key, line, v)?,
                "warmup_steps" => set(&mut t.warmup_steps, key, line, v)?,
                other => {
                    return Err(Error::Parse { path: "<config>".into(), line, field: other.to_string(), message: "unknown key".into() })
                }
            }
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(String, String)> {
        let (m, t) = (&self.model, &self.train);
        [
            ("variant", m.variant.to_string()),
            ("d_model", m.d_model.to_string()),
            ("n_layers", m.n_layers.to_string()),
            ("n_heads", m.n_heads.to_string()),
            ("context_length", m.context_length.to_string()),
            ("max_timestep", m.max_timestep.to_string()),
            ("adaln_depth", m.adaln_depth.to_string()),
            ("dropout", m.dropout.to_string()),
            ("rtg_scale", m.rtg_scale.to_string()),
            ("lr", t.lr.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("steps", t.steps.to_string()),
            ("grad_clip", t.grad_clip.to_string()),
            ("warmup_steps", t.warmup_steps.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_file_overrides_defaults() {
        let text = "# run\nd_model = 32\nsteps=10 # short\n\nlr=0.01\n";
        let kv = parse_key_values(Path::new("c.txt"), text).unwrap();
        let mut rc = RunConfig::desk(EnvKind::Reacher, Variant::Ddt);
        rc.apply(&kv).unwrap();
        assert_eq!((rc.model.d_model, rc.train.steps, rc.train.lr), (32, 10, 0.01));
    }

    #[test]
    fn bad_lines_name_the_line() {
        assert!(matches!(parse_key_values(Path::new("c"), "a=1\nnope\n"), Err(Error::Parse { line: 2, .. })));
        let kv = parse_key_values(Path::new("c"), "steps=x\n").unwrap();
        let mut rc = RunConfig::desk(EnvKind::Reacher, Variant::Dt);
        assert!(matches!(rc.apply(&kv), Err(Error::Parse { line: 1, .. })));
        let kv = parse_key_values(Path::new("c"), "\nwidth=3\n").unwrap();
        assert!(matches!(rc.apply(&kv), Err(Error::Parse { line: 2, .. })));
    }
}
