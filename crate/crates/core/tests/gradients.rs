use std::rc::Rc;

use decoupled_dt::model::{build_attention_mask, Variant};
use decoupled_dt::tensor::{Graph, Tensor, Var};
use proptest::prelude::*;

const H: f64 = 1e-5;

/// Max relative error between the analytic gradient of `sum(w ⊙ f(x))` and
/// central differences, with denominators floored at 1e-4.
fn max_rel_error(shape: Vec<usize>, x: Vec<f64>, w: Vec<f64>, f: &dyn Fn(&mut Graph<f64>, Var) -> Var) -> f64 {
    let eval = |x: &[f64]| {
        let mut g = Graph::<f64>::new();
        let xv = g.leaf(&Tensor::new(shape.clone(), x.to_vec()).unwrap());
        let y = f(&mut g, xv);
        let wv = g.constant(g.shape(y).to_vec(), w.clone()).unwrap();
        let p = g.mul(y, wv).unwrap();
        g.value(p).iter().sum::<f64>()
    };
    let mut g = Graph::<f64>::new();
    let xv = g.leaf(&Tensor::new(shape.clone(), x.clone()).unwrap().with_grad());
    let y = f(&mut g, xv);
    let wv = g.constant(g.shape(y).to_vec(), w.clone()).unwrap();
    let p = g.mul(y, wv).unwrap();
    let s = g.sum(p);
    g.backward(s).unwrap();
    let analytic = g.grad(xv).unwrap().to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp[i] += H;
        let mut xm = x.clone();
        xm[i] -= H;
        let numeric = (eval(&xp) - eval(&xm)) / (2.0 * H);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-4);
        worst = worst.max(err);
    }
    worst
}

fn vals(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.5f64..1.5, n)
}

fn case(rows: usize, cols: usize, out_len: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (vals(rows * cols), vals(out_len))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn matmul_both_sides((x, w) in case(3, 4, 3 * 5), b in vals(4 * 5)) {
        let bb = b.clone();
        let e = max_rel_error(vec![3, 4], x.clone(), w.clone(), &move |g, x| {
            let bv = g.constant(vec![4, 5], bb.clone()).unwrap();
            g.matmul(x, bv).unwrap()
        });
        prop_assert!(e < 1e-6, "lhs {e}");
        let e = max_rel_error(vec![4, 5], b, w, &move |g, b| {
            let xv = g.constant(vec![3, 4], x.clone()).unwrap();
            g.matmul(xv, b).unwrap()
        });
        prop_assert!(e < 1e-6, "rhs {e}");
    }

    #[test]
    fn pointwise((x, w) in case(4, 6, 24)) {
        prop_assert!(max_rel_error(vec![4, 6], x.clone(), w.clone(), &|g, x| g.gelu(x)) < 1e-6);
        prop_assert!(max_rel_error(vec![4, 6], x.clone(), w.clone(), &|g, x| g.tanh(x)) < 1e-6);
        prop_assert!(max_rel_error(vec![4, 6], x.clone(), w.clone(), &|g, x| g.scale(x, -0.7)) < 1e-6);
        prop_assume!(x.iter().all(|v| v.abs() > 1e-3));
        prop_assert!(max_rel_error(vec![4, 6], x, w, &|g, x| g.relu(x)) < 1e-6);
    }

    #[test]
    fn softmax_and_layer_norm((x, w) in case(3, 5, 15)) {
        prop_assert!(max_rel_error(vec![3, 5], x.clone(), w.clone(), &|g, x| g.softmax_last_dim(x).unwrap()) < 1e-6);
        prop_assert!(max_rel_error(vec![3, 5], x, w, &|g, x| g.layer_norm(x, 1e-5).unwrap()) < 1e-5);
    }

    #[test]
    fn modulation((x, w) in case(3, 4, 12), gb in vals(3 * 8)) {
        let gbc = gb.clone();
        let e = max_rel_error(vec![3, 4], x.clone(), w.clone(), &move |g, x| {
            let gbv = g.constant(vec![3, 8], gbc.clone()).unwrap();
            let xn = g.layer_norm(x, 1e-5).unwrap();
            g.modulate(xn, gbv).unwrap()
        });
        prop_assert!(e < 1e-5, "x {e}");
        let e = max_rel_error(vec![3, 8], gb, w, &move |g, gb| {
            let xv = g.constant(vec![3, 4], x.clone()).unwrap();
            let xn = g.layer_norm(xv, 1e-5).unwrap();
            g.modulate(xn, gb).unwrap()
        });
        prop_assert!(e < 1e-6, "gb {e}");
    }

    #[test]
    fn bias_and_gain((x, w) in case(3, 4, 12), b in vals(4)) {
        let bb = b.clone();
        let e = max_rel_error(vec![3, 4], x.clone(), w.clone(), &move |g, x| {
            let bv = g.constant(vec![4], bb.clone()).unwrap();
            let y = g.add_bias(x, bv).unwrap();
            g.mul_last_dim(y, bv).unwrap()
        });
        prop_assert!(e < 1e-6, "x {e}");
        let e = max_rel_error(vec![4], b, w, &move |g, b| {
            let xv = g.constant(vec![3, 4], x.clone()).unwrap();
            let y = g.mul_last_dim(xv, b).unwrap();
            g.add_bias(y, b).unwrap()
        });
        prop_assert!(e < 1e-6, "b {e}");
    }

    #[test]
    fn rows_gather_and_concat((x, w) in case(4, 3, 5 * 3)) {
        let e = max_rel_error(vec![4, 3], x, w, &|g, x| {
            let a = g.gather_rows(x, vec![3, 0, 0]).unwrap();
            let b = g.gather_rows(x, vec![2, 1]).unwrap();
            g.concat_rows(&[a, b]).unwrap()
        });
        prop_assert!(e < 1e-6, "{e}");
    }

    #[test]
    fn masked_attention(x in vals(2 * 6 * 4), w in vals(2 * 6 * 4), variant in prop::sample::select(Variant::ALL.to_vec())) {
        let mask: Rc<[bool]> = build_attention_mask(variant, 6 / variant.tokens_per_step()).allowed.into();
        let valid: Rc<[bool]> = (0..12).map(|i| i != 0 && i != 1).collect();
        let e = max_rel_error(vec![12, 4], x, w, &move |g, x| {
            let q = g.scale(x, 0.8);
            let v = g.tanh(x);
            g.attention(q, x, v, 2, 6, 2, mask.clone(), valid.clone()).unwrap()
        });
        prop_assert!(e < 1e-5, "{variant}: {e}");
    }

    #[test]
    fn losses(x in vals(4 * 3), t in vals(4 * 3), cls in prop::collection::vec(0usize..3, 4)) {
        let mask = vec![true, false, true, true];
        let m = mask.clone();
        prop_assert!(max_rel_error(vec![4, 3], x.clone(), vec![1.0], &move |g, x| g.masked_mse(x, t.clone(), m.clone()).unwrap()) < 1e-6);
        prop_assert!(max_rel_error(vec![4, 3], x, vec![1.0], &move |g, x| g.masked_cross_entropy(x, cls.clone(), mask.clone()).unwrap()) < 1e-6);
    }
}
