use decoupled_dt::model::{build_attention_mask, Action, ActionSpace, History, Modality, Model, ModelConfig, Variant};
use decoupled_dt::tensor::Graph;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(variant: Variant, layers: usize, adaln_depth: usize, space: ActionSpace) -> ModelConfig {
    let ad = if space == ActionSpace::Discrete { 4 } else { 2 };
    let mut c = ModelConfig::new(variant, 3, ad, space);
    c.d_model = 16;
    c.n_heads = 2;
    c.n_layers = layers;
    c.context_length = 4;
    c.max_timestep = 64;
    c.adaln_depth = adaln_depth;
    c.rtg_scale = 5.0;
    c
}

fn random_history(c: &ModelConfig, len: usize, rng: &mut ChaCha8Rng) -> History {
    let t0 = rng.random_range(0..c.max_timestep - len);
    let mut h = History::default();
    for t in 0..len {
        h.push((0..c.obs_dim).map(|_| rng.random_range(-2.0..2.0)).collect(), t0 + t);
        if t + 1 < len {
            h.actions.push(match c.action_space {
                ActionSpace::Continuous => Action::Continuous((0..c.action_dim).map(|_| rng.random_range(-1.0..1.0)).collect()),
                ActionSpace::Discrete => Action::Discrete(rng.random_range(0..c.action_dim)),
            });
            h.past_rtgs.push(rng.random_range(-20.0..20.0));
        }
    }
    h
}

fn layer_norm(x: &[f32]) -> Vec<f32> {
    let mut g = Graph::<f32>::inference();
    let v = g.constant(vec![1, x.len()], x.to_vec()).unwrap();
    let n = g.layer_norm(v, 1e-5).unwrap();
    g.value(n).to_vec()
}

#[test]
fn adaln_zero_is_plain_layer_norm_at_init() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for depth in [1, 2] {
        let model = Model::<f32>::new(config(Variant::Ddt, 1, depth, ActionSpace::Continuous), 9).unwrap();
        for _ in 0..1000 {
            let x: Vec<f32> = (0..16).map(|_| rng.random_range(-10.0..10.0)).collect();
            let z: f32 = rng.random_range(-1e3..1e3);
            assert_eq!(model.adaln(&x, z).unwrap(), layer_norm(&x), "depth {depth}, z {z}");
        }
    }
}

#[test]
fn adaln_reacts_to_the_return_once_trained_away_from_zero() {
    let mut model = Model::<f32>::new(config(Variant::Ddt, 1, 1, ActionSpace::Continuous), 9).unwrap();
    model.params.adaln.as_mut().unwrap().out.weight.values_mut().iter_mut().for_each(|w| *w = 0.1);
    let x: Vec<f32> = (0..16).map(|i| i as f32).collect();
    assert_ne!(model.adaln(&x, 1.0).unwrap(), model.adaln(&x, -1.0).unwrap());
}

#[test]
fn fresh_ddt_ignores_the_target_return() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for (depth, space) in [(1, ActionSpace::Continuous), (2, ActionSpace::Continuous), (1, ActionSpace::Discrete)] {
        let c = config(Variant::Ddt, 2, depth, space);
        let model = Model::<f32>::new(c.clone(), 3).unwrap();
        for _ in 0..100 {
            let h = random_history(&c, rng.random_range(1..7), &mut rng);
            let base = model.predict_raw(&h, 0.0).unwrap();
            for target in [-100.0, -1.0, 0.5, 37.0] {
                assert_eq!(model.predict_raw(&h, target).unwrap(), base);
                assert_eq!(model.predict_action(&h, target).unwrap(), model.predict_action(&h, 0.0).unwrap());
            }
        }
    }
}

#[test]
fn ddt_never_reads_past_returns() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let c = config(Variant::Ddt, 2, 1, ActionSpace::Continuous);
    let mut model = Model::<f32>::new(c.clone(), 4).unwrap();
    model.params.adaln.as_mut().unwrap().out.weight.values_mut().iter_mut().for_each(|w| *w = rng.random_range(-0.5..0.5));
    let dt = Model::<f32>::new(config(Variant::Dt, 2, 1, ActionSpace::Continuous), 4).unwrap();
    let mut dt_moved = false;
    for _ in 0..200 {
        let mut h = random_history(&c, 5, &mut rng);
        let (base, dt_base) = (model.predict_raw(&h, 3.0).unwrap(), dt.predict_raw(&h, 3.0).unwrap());
        h.past_rtgs.shuffle(&mut rng);
        h.past_rtgs[0] += 1.0;
        assert_eq!(model.predict_raw(&h, 3.0).unwrap(), base);
        dt_moved |= dt.predict_raw(&h, 3.0).unwrap() != dt_base;
        // the latest return does matter once the head is non-zero
        assert_ne!(model.predict_raw(&h, -3.0).unwrap(), base);
    }
    assert!(dt_moved);
}

#[test]
fn blocked_mask_for_three_steps() {
    // rows are queries R0 o0 a0 R1 o1 a1 R2 o2 a2
    let expected = [
        "100000000", "110000000", "111000000", "011100000", "011110000", "011111000", "011011100", "011011110", "011011111",
    ];
    let m = build_attention_mask(Variant::BlockedDt, 3);
    assert_eq!(m.size, 9);
    let mut checked = 0;
    for (q, row) in expected.iter().enumerate() {
        for (k, bit) in row.chars().enumerate() {
            let (qt, km, kt) = (q / 3, k % 3, k / 3);
            let rule = k <= q && (km != 0 || kt == qt);
            assert_eq!(bit == '1', rule, "oracle disagrees with the rule at ({q},{k})");
            assert_eq!(m.get(q, k), rule, "({q},{k})");
            assert_eq!(m.tokens[k], ([Modality::Rtg, Modality::Obs, Modality::Action][km], kt));
            checked += 1;
        }
    }
    assert_eq!(checked, 81);
}

/// Gradient of the last-step prediction with respect to each scaled return.
fn rtg_gradient(model: &Model<f64>, h: &History) -> Vec<f64> {
    let batch = model.history_batch(h, 2.0).unwrap();
    let mut fp = model.forward_graph(&batch, Graph::new(), None, true).unwrap();
    let k = model.config.context_length;
    let g = &mut fp.graph;
    let last = g.gather_rows(fp.predictions, vec![k - 1]).unwrap();
    let s = g.sum(last);
    g.backward(s).unwrap();
    g.grad(fp.rtg_input).unwrap().to_vec()
}

#[test]
fn blocked_returns_receive_no_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let c = config(Variant::BlockedDt, 1, 1, ActionSpace::Continuous);
    let blocked = Model::<f64>::new(c.clone(), 2).unwrap();
    let dt = Model::<f64>::new(config(Variant::Dt, 1, 1, ActionSpace::Continuous), 2).unwrap();
    for _ in 0..20 {
        let h = random_history(&c, 4, &mut rng);
        let g = rtg_gradient(&blocked, &h);
        assert!(g[..3].iter().all(|&v| v == 0.0), "{g:?}");
        assert!(g[3] != 0.0);
        assert!(rtg_gradient(&dt, &h)[..3].iter().any(|&v| v != 0.0));
    }
}

#[test]
fn ddt_gradient_reaches_only_the_latest_return() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let c = config(Variant::Ddt, 3, 2, ActionSpace::Continuous);
    let mut model = Model::<f64>::new(c.clone(), 2).unwrap();
    model.params.adaln.as_mut().unwrap().out.weight.values_mut().iter_mut().for_each(|w| *w = rng.random_range(-0.5..0.5));
    for _ in 0..20 {
        let g = rtg_gradient(&model, &random_history(&c, 4, &mut rng));
        assert!(g[..3].iter().all(|&v| v == 0.0) && g[3] != 0.0, "{g:?}");
    }
}

#[test]
fn every_blocked_layer_puts_zero_weight_on_blocked_returns() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let c = config(Variant::BlockedDt, 3, 1, ActionSpace::Continuous);
    let model = Model::<f32>::new(c.clone(), 2).unwrap();
    let mask = build_attention_mask(Variant::BlockedDt, c.context_length);
    for _ in 0..10 {
        let a = model.extract_attention(&random_history(&c, 4, &mut rng), 1.0).unwrap();
        assert_eq!(a.layers.len(), 3);
        for heads in &a.layers {
            for p in heads {
                for q in 0..a.seq {
                    for k in 0..a.seq {
                        if !mask.get(q, k) {
                            assert_eq!(p[q * a.seq + k], 0.0);
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn stacked_blocked_layers_relay_earlier_returns() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let c = config(Variant::BlockedDt, 2, 1, ActionSpace::Continuous);
    let model = Model::<f64>::new(c.clone(), 2).unwrap();
    let g = rtg_gradient(&model, &random_history(&c, 4, &mut rng));
    assert!(g[..3].iter().any(|&v| v != 0.0));
}

#[test]
fn short_histories_pad_on_the_left() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for v in Variant::ALL {
        let c = config(v, 1, 1, ActionSpace::Discrete);
        let model = Model::<f32>::new(c.clone(), 1).unwrap();
        let h = random_history(&c, 2, &mut rng);
        let b = model.history_batch(&h, 1.0).unwrap();
        assert_eq!(b.loss_mask, vec![false, false, true, true]);
        assert_eq!(&b.timesteps[2..], &h.timesteps[..]);
        assert!(matches!(model.predict_action(&h, 1.0).unwrap(), Action::Discrete(i) if i < 4));
    }
}
