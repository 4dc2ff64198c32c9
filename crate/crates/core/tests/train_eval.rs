use decoupled_dt::data::Dataset;
use decoupled_dt::envs::{gen_dataset, Behavior, EnvKind, LinearReacher};
use decoupled_dt::eval::{normalized_score, rollout, rollout_with, run_episode};
use decoupled_dt::model::{Model, Variant};
use decoupled_dt::train::{desk_model_config, fit, train_run, TrainConfig};

fn reacher_data(episodes: usize) -> Dataset {
    gen_dataset(EnvKind::Reacher, Behavior::Mixture(0.5), episodes, 1).unwrap()
}

/// Faster schedule for short runs.
fn short(steps: usize, seed: u64) -> TrainConfig {
    TrainConfig { lr: 1e-3, batch_size: 32, steps, seed, grad_clip: 0.25, warmup_steps: 100 }
}

#[test]
fn zero_steps_returns_the_initial_model() {
    let ds = reacher_data(20);
    for v in Variant::ALL {
        let cfg = desk_model_config(EnvKind::Reacher, v);
        let (m, curve) = train_run(&ds, &cfg, &short(0, 4)).unwrap();
        assert!(curve.losses.is_empty());
        assert_eq!(m, Model::<f32>::new(cfg, 4).unwrap());
    }
}

#[test]
fn training_is_deterministic_per_seed() {
    let ds = reacher_data(50);
    let mut cfg = desk_model_config(EnvKind::Reacher, Variant::BlockedDt);
    cfg.dropout = 0.1;
    let a = train_run(&ds, &cfg, &short(40, 3)).unwrap();
    let b = train_run(&ds, &cfg, &short(40, 3)).unwrap();
    assert_eq!(a, b);
    let c = train_run(&ds, &cfg, &short(40, 4)).unwrap();
    assert_ne!(a.1, c.1);
}

#[test]
fn ddt_loss_halves_within_two_thousand_steps() {
    let ds = gen_dataset(EnvKind::Reacher, Behavior::Expert, 300, 1).unwrap();
    let mut cfg = desk_model_config(EnvKind::Reacher, Variant::Ddt);
    cfg.rtg_scale = ds.stats().suggested_rtg_scale;
    let (_, curve) = train_run(&ds, &cfg, &short(2000, 0)).unwrap();
    let (first, last) = (curve.window_mean(0..50), curve.window_mean(1900..2000));
    assert!(last < 0.5 * first, "loss {first} -> {last}");
}

#[test]
fn discrete_training_reduces_cross_entropy() {
    let ds = gen_dataset(EnvKind::Game2048, Behavior::Mixture(0.5), 60, 2).unwrap();
    for v in [Variant::Dt, Variant::Ddt] {
        let mut cfg = desk_model_config(EnvKind::Game2048, v);
        cfg.rtg_scale = ds.stats().suggested_rtg_scale;
        let mut model = Model::<f32>::new(cfg, 1).unwrap();
        let curve = fit(&mut model, &ds, &short(300, 0)).unwrap();
        assert!(curve.window_mean(250..300) < curve.window_mean(0..20) - 0.05, "{v}");
    }
}

#[test]
fn fit_rejects_foreign_datasets() {
    let ds = gen_dataset(EnvKind::Game2048, Behavior::Random, 2, 0).unwrap();
    let mut m = Model::<f32>::new(desk_model_config(EnvKind::Reacher, Variant::Dt), 0).unwrap();
    assert!(fit(&mut m, &ds, &short(1, 0)).is_err());
}

#[test]
fn rollouts_repeat_exactly() {
    let m = Model::<f32>::new(desk_model_config(EnvKind::Reacher, Variant::Dt), 2).unwrap();
    let a = rollout(&m, EnvKind::Reacher, -3.0, 5, 9).unwrap();
    let b = rollout(&m, EnvKind::Reacher, -3.0, 5, 9).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.returns.len(), 5);
    assert!(a.normalized.is_some());
    let c = rollout_with(&m, |_| LinearReacher::with_position(0.0), -3.0, 3, 9, None).unwrap();
    assert!(c.normalized.is_none());
    assert!(c.returns.iter().all(|&r| r == c.returns[0]));
    assert!(c.std_error < 1e-12);
}

#[test]
fn conditioning_return_drops_by_each_reward() {
    let m = Model::<f32>::new(desk_model_config(EnvKind::Reacher, Variant::Ddt), 2).unwrap();
    let trace = run_episode(&m, &mut LinearReacher::with_position(0.3), -4.0).unwrap();
    assert_eq!(trace.rewards.len(), 20);
    assert_eq!(trace.presented_rtgs[0], -4.0);
    for t in 1..20 {
        assert!((trace.presented_rtgs[t] - (trace.presented_rtgs[t - 1] - trace.rewards[t - 1])).abs() < 1e-12);
    }
}

#[test]
fn normalized_score_reference_points() {
    assert_eq!(normalized_score(-10.0, -10.0, -2.0).unwrap(), 0.0);
    assert_eq!(normalized_score(-2.0, -10.0, -2.0).unwrap(), 100.0);
    assert_eq!(normalized_score(-6.0, -10.0, -2.0).unwrap(), 50.0);
    assert!(normalized_score(1.0, 3.0, 3.0).is_err());
}
