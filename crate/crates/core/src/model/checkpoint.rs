use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, Parameters};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct NamedArray {
    name: String,
    shape: Vec<usize>,
    values: Vec<f32>,
}

/// On-disk model: config, free-form metadata and named flat arrays.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: ModelConfig,
    /// e.g. `env_id`, `dataset_max_return`, `seed`.
    pub meta: BTreeMap<String, String>,
    params: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn from_model(model: &Model<f32>, meta: BTreeMap<String, String>) -> Self {
        let params = model
            .params
            .named()
            .into_iter()
            .map(|(name, t)| NamedArray { name, shape: t.shape().to_vec(), values: t.values().to_vec() })
            .collect();
        Checkpoint { format_version: CHECKPOINT_FORMAT_VERSION, config: model.config.clone(), meta, params }
    }

    pub fn to_model(&self) -> Result<Model<f32>> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {}", self.format_version)));
        }
        self.config.validate()?;
        let mut stored: BTreeMap<&str, &NamedArray> = self.params.iter().map(|a| (a.name.as_str(), a)).collect();
        let mut params = Parameters::<Tensor<f32>>::init(&self.config, 0);
        for (name, t) in params.named_mut() {
            let a = stored
                .remove(name.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if a.shape != t.shape() {
                return Err(Error::Checkpoint(format!("parameter `{name}` has shape {:?}, expected {:?}", a.shape, t.shape())));
            }
            *t = Tensor::new(a.shape.clone(), a.values.clone())?.with_grad();
        }
        if let Some(extra) = stored.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected parameter `{extra}`")));
        }
        Model::from_parts(self.config.clone(), params)
    }

    pub fn meta_f64(&self, key: &str) -> Option<f64> {
        self.meta.get(key).and_then(|v| v.parse().ok())
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let text = serde_json::to_string(ckpt).map_err(|e| Error::Checkpoint(e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ActionSpace, Variant};

    #[test]
    fn checkpoint_round_trip() {
        let mut c = ModelConfig::new(Variant::Ddt, 16, 4, ActionSpace::Discrete);
        c.d_model = 8;
        c.adaln_depth = 2;
        let m = Model::<f32>::new(c, 5).unwrap();
        let meta = BTreeMap::from([("env_id".to_string(), "g2048".to_string())]);
        let ck = Checkpoint::from_model(&m, meta);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        save_checkpoint(&p, &ck).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_model().unwrap(), m);
    }

    #[test]
    fn shape_mismatch_detected() {
        let c = ModelConfig::new(Variant::Dt, 1, 1, ActionSpace::Continuous);
        let m = Model::<f32>::new(c, 5).unwrap();
        let mut ck = Checkpoint::from_model(&m, BTreeMap::new());
        ck.params[0].shape = vec![2, 64];
        assert!(ck.to_model().is_err());
        ck.params.remove(0);
        assert!(matches!(ck.to_model(), Err(Error::Checkpoint(_))));
    }
}
