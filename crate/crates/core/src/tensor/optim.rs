use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam moments for an ordered list of parameters.
#[derive(Clone, Debug)]
pub struct AdamState<S: Scalar> {
    pub config: AdamConfig,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
    t: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor<S>>) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (vec![S::zero(); p.len()], vec![S::zero(); p.len()]))
            .unzip();
        AdamState { config, m, v, t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self, i: usize) -> &[S] {
        &self.m[i]
    }

    pub fn second_moment(&self, i: usize) -> &[S] {
        &self.v[i]
    }

    /// One bias-corrected Adam update. Parameters without a gradient buffer
    /// are treated as having zero gradient. Any non-finite gradient rejects
    /// the whole step before anything is modified.
    pub fn step<N: AsRef<str>>(&mut self, params: &mut [(N, &mut Tensor<S>)]) -> Result<()> {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        for (name, p) in params.iter() {
            if let Some(g) = p.grad() {
                if g.iter().any(|x| !x.is_finite()) {
                    let name = name.as_ref();
                    log::warn!("adam: non-finite gradient in `{name}`, skipping step {}", self.t + 1);
                    return Err(Error::NonFiniteGradient(name.to_string()));
                }
            }
        }
        self.t += 1;
        let c = self.config;
        let (b1, b2) = (S::of(c.beta1), S::of(c.beta2));
        let bc1 = S::of(1.0 - c.beta1.powi(self.t as i32));
        let bc2 = S::of(1.0 - c.beta2.powi(self.t as i32));
        let (lr, eps) = (S::of(c.lr), S::of(c.eps));
        for (i, (_, p)) in params.iter_mut().enumerate() {
            let Some(g) = p.grad().map(|g| g.to_vec()) else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.values_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (S::one() - b1) * g[j];
                v[j] = b2 * v[j] + (S::one() - b2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *w = *w - lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<S: Scalar, N>(params: &mut [(N, &mut Tensor<S>)], max_norm: f64) -> f64 {
    let total: f64 = params
        .iter()
        .filter_map(|(_, p)| p.grad())
        .flat_map(|g| g.iter().map(|x| x.to_f64_lossy().powi(2)))
        .sum::<f64>()
        .sqrt();
    if total > max_norm && total.is_finite() {
        let s = S::of(max_norm / (total + 1e-6));
        for (_, p) in params.iter_mut() {
            if p.grad().is_some() {
                let scaled: Vec<S> = p.grad().unwrap().iter().map(|&x| x * s).collect();
                p.zero_grad();
                p.add_grad(&scaled);
            }
        }
    }
    total
}
