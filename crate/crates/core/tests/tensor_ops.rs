use mbanet::gradcheck::{check_gradients, check_gradients_with_params, DEFAULT_STEP, DEFAULT_TOLERANCE};
use mbanet::tensor::{
    pointwise_conv, Activation, BatchNormState, Graph, Mode, ParamGroup, ParamStore, Tensor, Var,
};
use mbanet::{Error, Result};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape.to_vec(), data).unwrap()
}

fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = Tensor::zeros(vec![m, n]);
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a.at(&[i, p]) * b.at(&[p, j]);
            }
            out.set(&[i, j], s);
        }
    }
    out
}

fn eval1(x: Tensor<f64>, f: impl FnOnce(&mut Graph<f64>, Var) -> Result<Var>) -> Tensor<f64> {
    let mut g = Graph::new();
    let v = g.leaf(x, false).unwrap();
    let out = f(&mut g, v).unwrap();
    g.value(out).clone()
}

fn assert_grad_ok(report: mbanet::gradcheck::GradCheckReport, what: &str) {
    assert!(
        report.passes(DEFAULT_TOLERANCE),
        "{what}: rel err {} at {:?} (analytic {}, numeric {})",
        report.max_rel_error,
        report.worst,
        report.analytic,
        report.numeric
    );
}

#[test]
fn matmul_identity_and_hand_cases() {
    let mut g = Graph::<f64>::new();
    let i = g.leaf(t(&[2, 2], &[1., 0., 0., 1.]), false).unwrap();
    let b = g.leaf(t(&[2, 2], &[3., 4., 5., 6.]), false).unwrap();
    let c = g.matmul(i, b).unwrap();
    assert_eq!(g.value(c).data(), &[3., 4., 5., 6.]);

    let r = g.leaf(t(&[1, 2], &[1., 2.]), false).unwrap();
    let col = g.leaf(t(&[2, 1], &[3., 4.]), false).unwrap();
    let d = g.matmul(r, col).unwrap();
    assert_eq!(g.value(d).data(), &[11.]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng(1);
    let a = Tensor::<f64>::randn(vec![5, 7], 1.0, &mut r);
    let b = Tensor::<f64>::randn(vec![7, 3], 1.0, &mut r);
    let expected = naive_matmul(&a, &b);
    let mut g = Graph::new();
    let (va, vb) = (g.leaf(a, false).unwrap(), g.leaf(b, false).unwrap());
    let c = g.matmul(va, vb).unwrap();
    assert!(g.value(c).max_abs_diff(&expected) < 1e-12);
}

#[test]
fn matmul_shape_error_reports_both_shapes() {
    let mut g = Graph::<f64>::new();
    let a = g.leaf(Tensor::zeros(vec![2, 3]), false).unwrap();
    let b = g.leaf(Tensor::zeros(vec![4, 2]), false).unwrap();
    match g.matmul(a, b) {
        Err(Error::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![4, 2]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn softmax_examples() {
    let y = eval1(t(&[1, 2], &[0., 0.]), |g, x| g.softmax_rows(x));
    assert_eq!(y.data(), &[0.5, 0.5]);

    let y = eval1(t(&[1, 3], &[1., 2., 3.]), |g, x| g.softmax_rows(x));
    let z: f64 = [1f64, 2., 3.].iter().map(|v| v.exp()).sum();
    for (j, v) in [1f64, 2., 3.].iter().enumerate() {
        assert!((y.data()[j] - v.exp() / z).abs() < 1e-15);
    }

    let a = eval1(t(&[1, 2], &[0.3, 1.7]), |g, x| g.softmax_rows(x));
    let b = eval1(t(&[1, 2], &[100.3, 101.7]), |g, x| g.softmax_rows(x));
    assert!(a.max_abs_diff(&b) < 1e-12);
}

#[test]
fn softmax_rejects_non_finite() {
    let mut g = Graph::<f64>::new();
    assert!(matches!(
        g.leaf(t(&[1, 2], &[f64::NAN, 0.]), false),
        Err(Error::NonFinite { .. })
    ));
}

#[test]
fn concat_segments_in_order() {
    let mut g = Graph::<f64>::new();
    let parts: Vec<Var> = (0..3)
        .map(|i| {
            let base = (i * 4) as f64;
            g.leaf(t(&[4], &[base, base + 1., base + 2., base + 3.]), false).unwrap()
        })
        .collect();
    let c = g.concat(&parts, 0).unwrap();
    let expected: Vec<f64> = (0..12).map(|v| v as f64).collect();
    assert_eq!(g.value(c).data(), expected.as_slice());
}

#[test]
fn pointwise_conv_identity_with_neutral_bn() {
    let mut r = rng(2);
    let x = Tensor::<f64>::randn(vec![2, 3, 2, 2], 1.0, &mut r);
    let mut store = ParamStore::new();
    let bn = BatchNormState::new(&mut store, "bn", 3, ParamGroup::New).unwrap();
    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), false).unwrap();
    let mut eye = Tensor::zeros(vec![3, 3]);
    for i in 0..3 {
        eye.set(&[i, i], 1.0);
    }
    let w = g.leaf(eye, false).unwrap();
    let y = pointwise_conv(&mut g, &mut store, xv, w, Some(&bn), Activation::Identity, Mode::Eval).unwrap();
    // neutral BN still divides by sqrt(1 + eps)
    assert!(g.value(y).max_abs_diff(&x) < 1e-5 * 4.0);
    let yb = pointwise_conv(&mut g, &mut store, xv, w, None, Activation::Identity, Mode::Eval).unwrap();
    assert_eq!(g.value(yb), &x);
}

#[test]
fn pointwise_conv_on_single_pixel_is_dense_layer() {
    let mut r = rng(3);
    let x = Tensor::<f64>::randn(vec![4, 5, 1, 1], 1.0, &mut r);
    let w = Tensor::<f64>::randn(vec![3, 5], 1.0, &mut r);
    let mut store = ParamStore::new();
    let mut g = Graph::new();
    let (xv, wv) = (g.leaf(x.clone(), false).unwrap(), g.leaf(w.clone(), false).unwrap());
    let y = pointwise_conv(&mut g, &mut store, xv, wv, None, Activation::Relu, Mode::Eval).unwrap();
    for b in 0..4 {
        for o in 0..3 {
            let dense: f64 = (0..5).map(|i| w.at(&[o, i]) * x.at(&[b, i, 0, 0])).sum();
            assert!((g.value(y).at(&[b, o, 0, 0]) - dense.max(0.0)).abs() < 1e-12);
        }
    }
}

#[test]
fn train_mode_bn_moments() {
    let mut r = rng(4);
    let x = Tensor::<f64>::randn(vec![6, 2, 3, 3], 3.0, &mut r).map(|v| v + 5.0);
    let mut store = ParamStore::new();
    let bn = BatchNormState::new(&mut store, "bn", 2, ParamGroup::New).unwrap();
    store.value_mut(bn.scale).data_mut().copy_from_slice(&[2.0, 0.5]);
    store.value_mut(bn.shift).data_mut().copy_from_slice(&[-1.0, 3.0]);
    let mut g = Graph::new();
    let xv = g.leaf(x, false).unwrap();
    let y = g.batch_norm(&mut store, &bn, xv, Mode::Train).unwrap();
    let out = g.value(y);
    for (ch, (scale, shift)) in [(2.0, -1.0), (0.5, 3.0)].into_iter().enumerate() {
        let vals: Vec<f64> = (0..6)
            .flat_map(|b| (0..9).map(move |p| (b, p)))
            .map(|(b, p)| out.at(&[b, ch, p / 3, p % 3]))
            .collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((mean - shift).abs() < 1e-10);
        assert!((std - scale).abs() < 1e-3);
    }
    // running stats moved toward the batch statistics
    assert!(store.value(bn.running_mean).data().iter().all(|&m| m > 0.1));
}

#[test]
fn eval_mode_bn_is_deterministic() {
    let mut r = rng(5);
    let x = Tensor::<f32>::randn(vec![2, 4, 3, 3], 1.0, &mut r);
    let mut store = ParamStore::<f32>::new();
    let bn = BatchNormState::new(&mut store, "bn", 4, ParamGroup::New).unwrap();
    let run = |store: &mut ParamStore<f32>| {
        let mut g = Graph::new();
        let xv = g.leaf(x.clone(), false).unwrap();
        let y = g.batch_norm(store, &bn, xv, Mode::Eval).unwrap();
        g.value(y).clone()
    };
    let a = run(&mut store);
    let b = run(&mut store);
    assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn global_average_pool_cases() {
    let y = eval1(Tensor::full(vec![2, 3, 4, 5], 1.5), |g, x| g.global_average_pool(x));
    assert!(y.data().iter().all(|&v| (v - 1.5).abs() < 1e-15));

    let x = t(&[1, 3, 1, 1], &[1., 2., 3.]);
    let y = eval1(x.clone(), |g, v| g.global_average_pool(v));
    assert_eq!(y.data(), x.data());

    let mut r = rng(6);
    let x = Tensor::<f64>::randn(vec![2, 3, 4, 2], 1.0, &mut r);
    let y = eval1(x.clone(), |g, v| g.global_average_pool(v));
    for b in 0..2 {
        for c in 0..3 {
            let mut s = 0.0;
            for h in 0..4 {
                for w in 0..2 {
                    s += x.at(&[b, c, h, w]);
                }
            }
            assert!((y.at(&[b, c]) - s / 8.0).abs() < 1e-14);
        }
    }
}

#[test]
fn backward_trivial_cases() {
    let mut r = rng(7);
    let x = Tensor::<f64>::randn(vec![3, 4], 1.0, &mut r);
    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), true).unwrap();
    let s = g.sum(xv).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(xv).unwrap().data().iter().all(|&v| v == 1.0));

    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), true).unwrap();
    let sq = g.mul(xv, xv).unwrap();
    let s = g.sum(sq).unwrap();
    let half = g.scale(s, 0.5).unwrap();
    g.backward(half).unwrap();
    assert!(g.grad(xv).unwrap().max_abs_diff(&x) < 1e-15);
}

#[test]
fn backward_on_non_scalar_fails() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::zeros(vec![2]), true).unwrap();
    assert!(matches!(g.backward(x), Err(Error::NotScalar(_))));
}

#[test]
fn gradients_accumulate_across_uses() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("w", t(&[2], &[1., 2.]), ParamGroup::New).unwrap();
    for _ in 0..2 {
        let mut g = Graph::new();
        let w = g.param(&store, id).unwrap();
        let s = g.sum(w).unwrap();
        g.backward(s).unwrap();
        g.accumulate_grads(&mut store);
    }
    assert_eq!(store.grad(id).data(), &[2.0, 2.0]);
    store.zero_grad();
    assert_eq!(store.grad(id).data(), &[0.0, 0.0]);
}

// Weighted sum against a fixed random probe so the loss is sensitive to every element.
fn probe_loss(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let probe = Tensor::randn(shape, 1.0, &mut rng(seed));
    let p = g.constant(probe)?;
    let prod = g.mul(y, p)?;
    g.sum(prod)
}

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), 1.0, &mut rng(seed))
}

#[test]
fn gradcheck_elementary_ops() {
    let cases: Vec<(&str, Vec<Tensor<f64>>, Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>)> = vec![
        (
            "matmul",
            vec![randn(&[3, 4], 1), randn(&[4, 2], 2)],
            Box::new(|g, v| {
                let y = g.matmul(v[0], v[1])?;
                probe_loss(g, y, 9)
            }),
        ),
        (
            "batched matmul",
            vec![randn(&[2, 3, 4], 3), randn(&[2, 4, 2], 4)],
            Box::new(|g, v| {
                let y = g.matmul(v[0], v[1])?;
                probe_loss(g, y, 9)
            }),
        ),
        (
            "broadcast matmul",
            vec![randn(&[3, 4], 5), randn(&[2, 4, 5], 6)],
            Box::new(|g, v| {
                let y = g.matmul(v[0], v[1])?;
                let bt = g.transpose(v[1])?;
                let at = g.transpose(v[0])?;
                let z = g.matmul(bt, at)?;
                let a = probe_loss(g, y, 9)?;
                let b = probe_loss(g, z, 10)?;
                g.add(a, b)
            }),
        ),
        (
            "permute+reshape",
            vec![randn(&[2, 3, 4], 7)],
            Box::new(|g, v| {
                let p = g.permute(v[0], &[2, 0, 1])?;
                let r = g.reshape(p, &[4, 6])?;
                probe_loss(g, r, 9)
            }),
        ),
        (
            "concat",
            vec![randn(&[2, 3], 8), randn(&[2, 2], 9)],
            Box::new(|g, v| {
                let c = g.concat(&[v[0], v[1]], 1)?;
                probe_loss(g, c, 11)
            }),
        ),
        (
            "softmax",
            vec![randn(&[3, 5], 10)],
            Box::new(|g, v| {
                let s = g.softmax_rows(v[0])?;
                probe_loss(g, s, 12)
            }),
        ),
        (
            "add/sub/mul",
            vec![randn(&[2, 3], 11), randn(&[2, 3], 12)],
            Box::new(|g, v| {
                let a = g.add(v[0], v[1])?;
                let s = g.sub(v[0], v[1])?;
                let m = g.mul(a, s)?;
                probe_loss(g, m, 13)
            }),
        ),
        (
            "scale_by",
            vec![randn(&[2, 3], 13), randn(&[1], 14)],
            Box::new(|g, v| {
                let y = g.scale_by(v[0], v[1])?;
                probe_loss(g, y, 15)
            }),
        ),
        (
            "add_bias",
            vec![randn(&[3, 4], 15), randn(&[4], 16)],
            Box::new(|g, v| {
                let y = g.add_bias(v[0], v[1])?;
                probe_loss(g, y, 17)
            }),
        ),
        (
            "conv2d 3x3 stride 2 pad 1",
            vec![randn(&[2, 2, 5, 4], 17), randn(&[3, 2, 3, 3], 18)],
            Box::new(|g, v| {
                let y = g.conv2d(v[0], v[1], 2, 1)?;
                probe_loss(g, y, 19)
            }),
        ),
        (
            "conv2d pointwise",
            vec![randn(&[2, 3, 2, 3], 19), randn(&[2, 3, 1, 1], 20)],
            Box::new(|g, v| {
                let y = g.conv2d(v[0], v[1], 1, 0)?;
                probe_loss(g, y, 21)
            }),
        ),
        (
            "leaky_relu/relu",
            vec![randn(&[3, 4], 21)],
            Box::new(|g, v| {
                let a = g.leaky_relu(v[0], 0.1)?;
                let b = g.relu(a)?;
                let c = g.add(a, b)?;
                probe_loss(g, c, 22)
            }),
        ),
        (
            "dropout",
            vec![randn(&[4, 5], 22)],
            Box::new(|g, v| {
                let y = g.dropout(v[0], 0.5, Mode::Train, &mut rng(99))?;
                probe_loss(g, y, 23)
            }),
        ),
        (
            "global_average_pool",
            vec![randn(&[2, 3, 2, 3], 23)],
            Box::new(|g, v| {
                let y = g.global_average_pool(v[0])?;
                probe_loss(g, y, 24)
            }),
        ),
        (
            "mean",
            vec![randn(&[2, 3], 24)],
            Box::new(|g, v| {
                let sq = g.mul(v[0], v[0])?;
                g.mean(sq)
            }),
        ),
        (
            "soft cross entropy",
            vec![randn(&[3, 4], 25)],
            Box::new(|g, v| {
                let target = Tensor::from_f64(
                    vec![3, 4],
                    &[0.7, 0.1, 0.1, 0.1, 0.1, 0.7, 0.1, 0.1, 0.25, 0.25, 0.25, 0.25],
                )?;
                g.soft_cross_entropy(v[0], &target)
            }),
        ),
        (
            "soft cross entropy, rows not summing to one",
            vec![randn(&[3, 3], 27)],
            Box::new(|g, v| {
                let target = Tensor::from_f64(vec![3, 3], &[0.9, 0.0, 0.1, 0.0, 0.0, 0.0, 0.5, 0.5, 0.5])?;
                g.soft_cross_entropy(v[0], &target)
            }),
        ),
        (
            "gather_rows",
            vec![randn(&[2, 3, 4], 26)],
            Box::new(|g, v| {
                let index = [0, 2, 1, 1, 2, 2, 0, 0];
                let y = g.gather_rows(v[0], &index, 2)?;
                probe_loss(g, y, 27)
            }),
        ),
    ];
    for (name, inputs, build) in cases {
        let report = check_gradients(|g, v| build(g, v), &inputs, DEFAULT_STEP).unwrap();
        assert_grad_ok(report, name);
    }
}

#[test]
fn gradcheck_batch_norm_train_and_eval() {
    for mode in [Mode::Train, Mode::Eval] {
        let mut store = ParamStore::new();
        let bn = BatchNormState::new(&mut store, "bn", 3, ParamGroup::New).unwrap();
        *store.value_mut(bn.scale) = randn(&[3], 30);
        *store.value_mut(bn.shift) = randn(&[3], 31);
        *store.value_mut(bn.running_mean) = randn(&[3], 32);
        *store.value_mut(bn.running_var) = randn(&[3], 33).map(|v| v.abs() + 0.5);
        let report = check_gradients_with_params(
            |g, store, v| {
                let y = g.batch_norm(store, &bn, v[0], mode)?;
                probe_loss(g, y, 34)
            },
            &[randn(&[4, 3, 2, 2], 35)],
            &store,
            DEFAULT_STEP,
        )
        .unwrap();
        assert_grad_ok(report, &format!("batch_norm {mode:?}"));
    }
}

#[test]
fn gradcheck_composite_pipeline() {
    // conv -> bn -> relu -> pointwise -> gap -> linear -> CE, all parameters checked
    let mut store = ParamStore::new();
    let w1 = store.add("w1", randn(&[4, 2, 3, 3], 40).map(|v| v * 0.5), ParamGroup::Backbone).unwrap();
    let bn = BatchNormState::new(&mut store, "bn", 4, ParamGroup::Backbone).unwrap();
    let w2 = store.add("w2", randn(&[3, 4], 41), ParamGroup::New).unwrap();
    let fc = store.add("fc", randn(&[3, 2], 42), ParamGroup::New).unwrap();
    let bias = store.add("bias", randn(&[2], 43), ParamGroup::New).unwrap();
    let target = Tensor::from_f64(vec![3, 2], &[0.95, 0.05, 0.05, 0.95, 0.95, 0.05]).unwrap();
    let report = check_gradients_with_params(
        |g, store, v| {
            let w1v = g.param(store, w1)?;
            let y = g.conv2d(v[0], w1v, 1, 1)?;
            let y = g.batch_norm(store, &bn, y, Mode::Train)?;
            let y = g.leaky_relu(y, 0.1)?;
            let w2v = g.param(store, w2)?;
            let y = pointwise_conv(g, store, y, w2v, None, Activation::Identity, Mode::Train)?;
            let y = g.global_average_pool(y)?;
            let fcv = g.param(store, fc)?;
            let y = g.matmul(y, fcv)?;
            let bv = g.param(store, bias)?;
            let y = g.add_bias(y, bv)?;
            g.soft_cross_entropy(y, &target)
        },
        &[randn(&[3, 2, 4, 4], 44)],
        &store,
        DEFAULT_STEP,
    )
    .unwrap();
    assert_grad_ok(report, "composite");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(
        rows in 1usize..5,
        cols in 1usize..7,
        scale in prop_oneof![Just(1.0f64), Just(1e2), Just(1e4)],
        seed in any::<u64>(),
    ) {
        let x = Tensor::<f64>::uniform(vec![rows, cols], -scale, scale, &mut rng(seed));
        let y = eval1(x, |g, v| g.softmax_rows(v));
        for row in y.data().chunks(cols) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn matmul_agrees_with_naive(m in 1usize..6, k in 1usize..6, n in 1usize..6, seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = Tensor::<f64>::randn(vec![m, k], 1.0, &mut r);
        let b = Tensor::<f64>::randn(vec![k, n], 1.0, &mut r);
        let expected = naive_matmul(&a, &b);
        let mut g = Graph::new();
        let (va, vb) = (g.leaf(a, false).unwrap(), g.leaf(b, false).unwrap());
        let c = g.matmul(va, vb).unwrap();
        prop_assert!(g.value(c).max_abs_diff(&expected) < 1e-12);
    }
}
