use super::Variant;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Rtg,
    Obs,
    Action,
}

impl Modality {
    pub fn label(self) -> &'static str {
        match self {
            Modality::Rtg => "R",
            Modality::Obs => "o",
            Modality::Action => "a",
        }
    }
}

/// Per-timestep token order for a variant.
pub fn token_layout(variant: Variant) -> &'static [Modality] {
    match variant {
        Variant::Dt | Variant::BlockedDt => &[Modality::Rtg, Modality::Obs, Modality::Action],
        Variant::Ddt => &[Modality::Obs, Modality::Action],
    }
}

/// Square boolean attention mask, row = query, column = key, true = allowed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskMatrix {
    pub size: usize,
    pub allowed: Vec<bool>,
    /// `(modality, timestep)` of each token.
    pub tokens: Vec<(Modality, usize)>,
}

impl MaskMatrix {
    pub fn get(&self, query: usize, key: usize) -> bool {
        self.allowed[query * self.size + key]
    }
}

pub fn build_attention_mask(variant: Variant, k: usize) -> MaskMatrix {
    let layout = token_layout(variant);
    let tokens: Vec<(Modality, usize)> =
        (0..k).flat_map(|t| layout.iter().map(move |&m| (m, t))).collect();
    let size = tokens.len();
    let mut allowed = vec![false; size * size];
    for q in 0..size {
        for key in 0..=q {
            let (km, kt) = tokens[key];
            let visible = match variant {
                Variant::BlockedDt => km != Modality::Rtg || kt == tokens[q].1,
                _ => true,
            };
            allowed[q * size + key] = visible;
        }
    }
    MaskMatrix { size, allowed, tokens }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn causal_masks_are_lower_triangular() {
        for (variant, n) in [(Variant::Ddt, 4), (Variant::Dt, 6)] {
            let m = build_attention_mask(variant, 2);
            assert_eq!(m.size, n);
            for q in 0..n {
                for k in 0..n {
                    assert_eq!(m.get(q, k), k <= q, "{variant} ({q},{k})");
                }
            }
        }
    }

    #[test]
    fn token_order() {
        let ddt = build_attention_mask(Variant::Ddt, 2);
        use Modality::*;
        assert_eq!(ddt.tokens, vec![(Obs, 0), (Action, 0), (Obs, 1), (Action, 1)]);
        let dt = build_attention_mask(Variant::Dt, 2);
        assert_eq!(dt.tokens, vec![(Rtg, 0), (Obs, 0), (Action, 0), (Rtg, 1), (Obs, 1), (Action, 1)]);
    }

    #[test]
    fn blocked_query_at_second_observation() {
        let m = build_attention_mask(Variant::BlockedDt, 2);
        // o₂ sits at index 4
        let visible: Vec<usize> = (0..6).filter(|&k| m.get(4, k)).collect();
        assert_eq!(visible, vec![1, 2, 3, 4]);
        assert!(!m.get(4, 0));
    }
}
