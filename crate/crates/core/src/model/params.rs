use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, Variant};
use crate::tensor::{Scalar, Tensor};

/// `y = x·weight + bias`, weight stored `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<P> {
    pub weight: P,
    pub bias: P,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormAffine<P> {
    pub gain: P,
    pub shift: P,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<P> {
    pub ln1: LayerNormAffine<P>,
    pub query: Linear<P>,
    pub key: Linear<P>,
    pub value: Linear<P>,
    pub proj: Linear<P>,
    pub ln2: LayerNormAffine<P>,
    pub fc: Linear<P>,
    pub fc_out: Linear<P>,
}

/// Maps the scalar return condition to `[γ | β]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaLnHead<P> {
    /// Present for the two-layer head (`1 → d`, ReLU).
    pub hidden: Option<Linear<P>>,
    /// Zero-initialized `→ 2d` projection.
    pub out: Linear<P>,
}

/// Trainable weights, generic over the leaf type so the same structure can
/// hold stored tensors or graph handles.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters<P> {
    pub embed_obs: Linear<P>,
    pub embed_action: Linear<P>,
    pub embed_rtg: Option<Linear<P>>,
    pub embed_timestep: P,
    pub embed_ln: LayerNormAffine<P>,
    pub blocks: Vec<Block<P>>,
    pub ln_f: Option<LayerNormAffine<P>>,
    pub adaln: Option<AdaLnHead<P>>,
    pub predict_action: Linear<P>,
}

impl<P> Linear<P> {
    fn walk<'a>(&'a self, name: &str, f: &mut dyn FnMut(String, &'a P)) {
        f(format!("{name}.weight"), &self.weight);
        f(format!("{name}.bias"), &self.bias);
    }
    fn walk_mut<'a>(&'a mut self, name: &str, f: &mut dyn FnMut(String, &'a mut P)) {
        f(format!("{name}.weight"), &mut self.weight);
        f(format!("{name}.bias"), &mut self.bias);
    }
    fn map<Q>(&self, name: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> Linear<Q> {
        Linear { weight: f(&format!("{name}.weight"), &self.weight), bias: f(&format!("{name}.bias"), &self.bias) }
    }
}

impl<P> LayerNormAffine<P> {
    fn walk<'a>(&'a self, name: &str, f: &mut dyn FnMut(String, &'a P)) {
        f(format!("{name}.gain"), &self.gain);
        f(format!("{name}.shift"), &self.shift);
    }
    fn walk_mut<'a>(&'a mut self, name: &str, f: &mut dyn FnMut(String, &'a mut P)) {
        f(format!("{name}.gain"), &mut self.gain);
        f(format!("{name}.shift"), &mut self.shift);
    }
    fn map<Q>(&self, name: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> LayerNormAffine<Q> {
        LayerNormAffine { gain: f(&format!("{name}.gain"), &self.gain), shift: f(&format!("{name}.shift"), &self.shift) }
    }
}

impl<P> Block<P> {
    fn walk<'a>(&'a self, name: &str, f: &mut dyn FnMut(String, &'a P)) {
        self.ln1.walk(&format!("{name}.ln1"), f);
        self.query.walk(&format!("{name}.attn.query"), f);
        self.key.walk(&format!("{name}.attn.key"), f);
        self.value.walk(&format!("{name}.attn.value"), f);
        self.proj.walk(&format!("{name}.attn.proj"), f);
        self.ln2.walk(&format!("{name}.ln2"), f);
        self.fc.walk(&format!("{name}.mlp.fc"), f);
        self.fc_out.walk(&format!("{name}.mlp.out"), f);
    }
    fn walk_mut<'a>(&'a mut self, name: &str, f: &mut dyn FnMut(String, &'a mut P)) {
        self.ln1.walk_mut(&format!("{name}.ln1"), f);
        self.query.walk_mut(&format!("{name}.attn.query"), f);
        self.key.walk_mut(&format!("{name}.attn.key"), f);
        self.value.walk_mut(&format!("{name}.attn.value"), f);
        self.proj.walk_mut(&format!("{name}.attn.proj"), f);
        self.ln2.walk_mut(&format!("{name}.ln2"), f);
        self.fc.walk_mut(&format!("{name}.mlp.fc"), f);
        self.fc_out.walk_mut(&format!("{name}.mlp.out"), f);
    }
    fn map<Q>(&self, name: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> Block<Q> {
        Block {
            ln1: self.ln1.map(&format!("{name}.ln1"), f),
            query: self.query.map(&format!("{name}.attn.query"), f),
            key: self.key.map(&format!("{name}.attn.key"), f),
            value: self.value.map(&format!("{name}.attn.value"), f),
            proj: self.proj.map(&format!("{name}.attn.proj"), f),
            ln2: self.ln2.map(&format!("{name}.ln2"), f),
            fc: self.fc.map(&format!("{name}.mlp.fc"), f),
            fc_out: self.fc_out.map(&format!("{name}.mlp.out"), f),
        }
    }
}

impl<P> Parameters<P> {
    /// Visits every leaf in a fixed order with its dotted name.
    pub fn walk<'a>(&'a self, f: &mut dyn FnMut(String, &'a P)) {
        self.embed_obs.walk("embed_obs", f);
        self.embed_action.walk("embed_action", f);
        if let Some(l) = &self.embed_rtg {
            l.walk("embed_rtg", f);
        }
        f("embed_timestep".into(), &self.embed_timestep);
        self.embed_ln.walk("embed_ln", f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.walk(&format!("blocks.{i}"), f);
        }
        if let Some(l) = &self.ln_f {
            l.walk("ln_f", f);
        }
        if let Some(h) = &self.adaln {
            if let Some(l) = &h.hidden {
                l.walk("adaln.hidden", f);
            }
            h.out.walk("adaln.out", f);
        }
        self.predict_action.walk("predict_action", f);
    }

    /// Same order as [`Parameters::walk`].
    pub fn walk_mut<'a>(&'a mut self, f: &mut dyn FnMut(String, &'a mut P)) {
        self.embed_obs.walk_mut("embed_obs", f);
        self.embed_action.walk_mut("embed_action", f);
        if let Some(l) = &mut self.embed_rtg {
            l.walk_mut("embed_rtg", f);
        }
        f("embed_timestep".into(), &mut self.embed_timestep);
        self.embed_ln.walk_mut("embed_ln", f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.walk_mut(&format!("blocks.{i}"), f);
        }
        if let Some(l) = &mut self.ln_f {
            l.walk_mut("ln_f", f);
        }
        if let Some(h) = &mut self.adaln {
            if let Some(l) = &mut h.hidden {
                l.walk_mut("adaln.hidden", f);
            }
            h.out.walk_mut("adaln.out", f);
        }
        self.predict_action.walk_mut("predict_action", f);
    }

    pub fn map<Q>(&self, f: &mut dyn FnMut(&str, &P) -> Q) -> Parameters<Q> {
        Parameters {
            embed_obs: self.embed_obs.map("embed_obs", f),
            embed_action: self.embed_action.map("embed_action", f),
            embed_rtg: self.embed_rtg.as_ref().map(|l| l.map("embed_rtg", f)),
            embed_timestep: f("embed_timestep", &self.embed_timestep),
            embed_ln: self.embed_ln.map("embed_ln", f),
            blocks: self.blocks.iter().enumerate().map(|(i, b)| b.map(&format!("blocks.{i}"), f)).collect(),
            ln_f: self.ln_f.as_ref().map(|l| l.map("ln_f", f)),
            adaln: self.adaln.as_ref().map(|h| AdaLnHead {
                hidden: h.hidden.as_ref().map(|l| l.map("adaln.hidden", f)),
                out: h.out.map("adaln.out", f),
            }),
            predict_action: self.predict_action.map("predict_action", f),
        }
    }

    pub fn named(&self) -> Vec<(String, &P)> {
        let mut out = Vec::new();
        self.walk(&mut |n, p| out.push((n, p)));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut P)> {
        let mut out = Vec::new();
        self.walk_mut(&mut |n, p| out.push((n, p)));
        out
    }
}

fn uniform_tensor<S: Scalar>(rng: &mut ChaCha8Rng, shape: Vec<usize>, bound: f64) -> Tensor<S> {
    let n = shape.iter().product();
    let vals = (0..n).map(|_| S::of(rng.random_range(-bound..bound))).collect();
    Tensor::new(shape, vals).expect("shape").with_grad()
}

fn linear<S: Scalar>(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Linear<Tensor<S>> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Linear {
        weight: uniform_tensor(rng, vec![fan_in, fan_out], bound),
        bias: uniform_tensor(rng, vec![fan_out], bound),
    }
}

fn zero_linear<S: Scalar>(fan_in: usize, fan_out: usize) -> Linear<Tensor<S>> {
    Linear {
        weight: Tensor::zeros(vec![fan_in, fan_out]).with_grad(),
        bias: Tensor::zeros(vec![fan_out]).with_grad(),
    }
}

fn layer_norm_affine<S: Scalar>(d: usize) -> LayerNormAffine<Tensor<S>> {
    LayerNormAffine {
        gain: Tensor::new(vec![d], vec![S::one(); d]).expect("shape").with_grad(),
        shift: Tensor::zeros(vec![d]).with_grad(),
    }
}

const TIMESTEP_INIT_BOUND: f64 = 0.05;

impl<S: Scalar> Parameters<Tensor<S>> {
    /// Seeded initialization. The adaLN output projection starts at zero.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let embed_obs = linear(&mut rng, config.obs_dim, d);
        let embed_action = linear(&mut rng, config.action_dim, d);
        let embed_rtg = config.variant.uses_rtg_tokens().then(|| linear(&mut rng, 1, d));
        let embed_timestep = uniform_tensor(&mut rng, vec![config.max_timestep, d], TIMESTEP_INIT_BOUND);
        let embed_ln = layer_norm_affine(d);
        let blocks = (0..config.n_layers)
            .map(|_| Block {
                ln1: layer_norm_affine(d),
                query: linear(&mut rng, d, d),
                key: linear(&mut rng, d, d),
                value: linear(&mut rng, d, d),
                proj: linear(&mut rng, d, d),
                ln2: layer_norm_affine(d),
                fc: linear(&mut rng, d, 4 * d),
                fc_out: linear(&mut rng, 4 * d, d),
            })
            .collect();
        let (ln_f, adaln) = match config.variant {
            Variant::Ddt => {
                let hidden = (config.adaln_depth == 2).then(|| linear(&mut rng, 1, d));
                let in_dim = if hidden.is_some() { d } else { 1 };
                (None, Some(AdaLnHead { hidden, out: zero_linear(in_dim, 2 * d) }))
            }
            _ => (Some(layer_norm_affine(d)), None),
        };
        let predict_action = linear(&mut rng, d, config.action_dim);
        Parameters {
            embed_obs,
            embed_action,
            embed_rtg,
            embed_timestep,
            embed_ln,
            blocks,
            ln_f,
            adaln,
            predict_action,
        }
    }

    pub fn zero_grad(&mut self) {
        self.walk_mut(&mut |_, t| t.zero_grad());
    }

    pub fn num_scalars(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<T: Scalar>(&self) -> Parameters<Tensor<T>> {
        self.map(&mut |_, t| t.cast())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ActionSpace;

    #[test]
    fn adaln_head_is_zero_initialized() {
        for depth in [1, 2] {
            let mut c = ModelConfig::new(Variant::Ddt, 3, 2, ActionSpace::Continuous);
            c.d_model = 8;
            c.adaln_depth = depth;
            let p = Parameters::<Tensor<f32>>::init(&c, 7);
            let head = p.adaln.as_ref().unwrap();
            assert!(head.out.weight.values().iter().all(|&v| v == 0.0));
            assert!(head.out.bias.values().iter().all(|&v| v == 0.0));
            assert_eq!(head.out.weight.shape(), &[if depth == 1 { 1 } else { 8 }, 16]);
            assert_eq!(head.hidden.is_some(), depth == 2);
            assert!(p.embed_rtg.is_none() && p.ln_f.is_none());
        }
    }

    #[test]
    fn walk_orders_agree() {
        let c = ModelConfig::new(Variant::Dt, 3, 2, ActionSpace::Continuous);
        let mut p = Parameters::<Tensor<f32>>::init(&c, 1);
        let names: Vec<String> = p.named().into_iter().map(|(n, _)| n).collect();
        let names_mut: Vec<String> = p.named_mut().into_iter().map(|(n, _)| n).collect();
        let mapped = p.map(&mut |n, _| n.to_string());
        let names_map: Vec<String> = mapped.named().into_iter().map(|(_, n)| n.clone()).collect();
        assert_eq!(names, names_mut);
        assert_eq!(names, names_map);
        assert!(names.contains(&"embed_rtg.weight".to_string()));
    }

    #[test]
    fn init_is_seeded() {
        let c = ModelConfig::new(Variant::Ddt, 3, 2, ActionSpace::Continuous);
        assert_eq!(Parameters::<Tensor<f32>>::init(&c, 3), Parameters::<Tensor<f32>>::init(&c, 3));
        assert_ne!(Parameters::<Tensor<f32>>::init(&c, 3), Parameters::<Tensor<f32>>::init(&c, 4));
    }
}
