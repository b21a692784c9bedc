use semisup::tensor::{grad_check, BnStats};
use semisup::{Error, Graph, Rng, Tensor, Var};

fn random(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
}

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, data).unwrap()
}

/// Random linear functional so every output coordinate carries gradient.
fn probe(g: &mut Graph<f64>, y: Var, seed: u64) -> Var {
    let shape = g.shape(y).to_vec();
    let mut rng = Rng::new(seed);
    let w = g.constant(random(&mut rng, &shape));
    let p = g.mul(y, w).unwrap();
    g.sum(p, None).unwrap()
}

#[test]
fn matmul_identity_and_small_case() {
    let mut g = Graph::<f64>::new();
    let id = g.constant(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
    let a_data = [1., 2., 3., 4., 5., 6., 7., 8., 9.];
    let a = g.constant(t(&[3, 3], &a_data));
    let out = g.matmul(id, a).unwrap();
    assert_eq!(g.value(out).data(), &a_data);

    let a = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
    let b = g.constant(t(&[2, 1], &[0., 1.]));
    let out = g.matmul(a, b).unwrap();
    assert_eq!(g.shape(out), &[2, 1]);
    assert_eq!(g.value(out).data(), &[2., 4.]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    match g.matmul(a, b) {
        Err(Error::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = Rng::new(11);
    let a = random(&mut rng, &[5, 7]);
    let b = random(&mut rng, &[7, 3]);
    let report = grad_check(
        |g, v| {
            let y = g.matmul(v[0], v[1])?;
            Ok(probe(g, y, 1))
        },
        &[a, b],
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
    assert_eq!(report.checked, 35 + 21);
}

#[test]
fn conv2d_delta_kernel_and_zero_kernel() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::full(&[1, 1, 3, 3], 1.0));
    let mut k = vec![0.0; 9];
    k[4] = 1.0;
    let kd = g.constant(t(&[1, 1, 3, 3], &k));
    let y = g.conv2d(x, kd, 1).unwrap();
    assert_eq!(g.value(y).data(), &[1.0; 9]);

    let mut g = Graph::<f64>::new();
    let mut rng = Rng::new(2);
    let x = g.param(random(&mut rng, &[2, 3, 5, 5]));
    let kz = g.param(Tensor::zeros(&[4, 3, 3, 3]));
    let y = g.conv2d(x, kz, 2).unwrap();
    assert_eq!(g.shape(y), &[2, 4, 3, 3]);
    assert!(g.value(y).data().iter().all(|v| *v == 0.0));
    let l = probe(&mut g, y, 3);
    g.backward(l).unwrap();
    assert!(g.grad(x).unwrap().data().iter().all(|v| *v == 0.0));
}

#[test]
fn conv2d_channel_mismatch_and_bad_stride() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let k = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
    assert!(matches!(g.conv2d(x, k, 1), Err(Error::Dimension { .. })));
    let k = g.constant(Tensor::zeros(&[1, 2, 3, 3]));
    assert!(g.conv2d(x, k, 3).is_err());
}

#[test]
fn conv2d_gradient_matches_finite_differences() {
    let mut rng = Rng::new(5);
    for stride in [1, 2] {
        let x = random(&mut rng, &[2, 3, 8, 8]);
        let k = random(&mut rng, &[4, 3, 3, 3]);
        let report = grad_check(
            |g, v| {
                let y = g.conv2d(v[0], v[1], stride)?;
                Ok(probe(g, y, 9))
            },
            &[x, k],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "stride {stride}: {report:?}");
    }
}

#[test]
fn batchnorm_train_mode_standardizes() {
    let mut rng = Rng::new(8);
    let mut g = Graph::<f64>::new();
    let x = g.param(random(&mut rng, &[16, 5]));
    let gamma = g.param(Tensor::full(&[5], 1.0));
    let beta = g.param(Tensor::zeros(&[5]));
    let out = g.batchnorm(x, gamma, beta, BnStats::Batch).unwrap();
    let y = g.value(out.out);
    for f in 0..5 {
        let col: Vec<f64> = (0..16).map(|r| y.data()[r * 5 + f]).collect();
        let mean = col.iter().sum::<f64>() / 16.0;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-5);
        // eps = 1e-5 in the denominator shrinks the variance slightly.
        assert!((var - 1.0).abs() < 1e-4, "var {var}");
    }
    assert_eq!(out.mean.len(), 5);
}

#[test]
fn batchnorm_eval_identity_and_degenerate_batch() {
    let mut g = Graph::<f64>::new();
    let data = [0.3, -1.2, 2.0, 0.0];
    let x = g.param(t(&[2, 2], &data));
    let gamma = g.param(Tensor::full(&[2], 1.0));
    let beta = g.param(Tensor::zeros(&[2]));
    let mean = [0.0, 0.0];
    let var = [1.0, 1.0];
    let out = g
        .batchnorm(x, gamma, beta, BnStats::Running { mean: &mean, var: &var })
        .unwrap();
    for (a, b) in g.value(out.out).data().iter().zip(&data) {
        assert!((a - b).abs() < 1e-5);
    }

    let x1 = g.param(Tensor::zeros(&[1, 2]));
    assert!(matches!(
        g.batchnorm(x1, gamma, beta, BnStats::Batch),
        Err(Error::DegenerateBatch(_))
    ));
}

#[test]
fn batchnorm_gradients_match_finite_differences() {
    let mut rng = Rng::new(13);
    let x = random(&mut rng, &[6, 4]);
    let gamma = random(&mut rng, &[4]);
    let beta = random(&mut rng, &[4]);
    let report = grad_check(
        |g, v| {
            let y = g.batchnorm(v[0], v[1], v[2], BnStats::Batch)?.out;
            Ok(probe(g, y, 4))
        },
        &[x.clone(), gamma.clone(), beta.clone()],
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(report.passed, "train: {report:?}");

    let rm = [0.1, -0.2, 0.3, 0.0];
    let rv = [0.5, 1.5, 2.0, 1.0];
    let report = grad_check(
        |g, v| {
            let y = g
                .batchnorm(v[0], v[1], v[2], BnStats::Running { mean: &rm, var: &rv })?
                .out;
            Ok(probe(g, y, 4))
        },
        &[x, gamma, beta],
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(report.passed, "eval: {report:?}");

    // channel layout
    let x4 = random(&mut rng, &[3, 2, 3, 3]);
    let report = grad_check(
        |g, v| {
            let y = g.batchnorm(v[0], v[1], v[2], BnStats::Batch)?.out;
            Ok(probe(g, y, 6))
        },
        &[x4, random(&mut rng, &[2]), random(&mut rng, &[2])],
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(report.passed, "rank 4: {report:?}");
}

#[test]
fn relu_values_and_subgradient_at_zero() {
    let mut g = Graph::<f64>::new();
    let x = g.param(t(&[3], &[-1.0, 0.0, 2.0]));
    let y = g.relu(x);
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    let s = g.sum(y, None).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);
}

#[test]
fn exp_log_and_domain_error() {
    let mut g = Graph::<f64>::new();
    let z = g.param(Tensor::scalar(0.0));
    let e = g.exp(z);
    assert_eq!(g.value(e).item(), 1.0);

    let bad = g.constant(t(&[2], &[1.0, 0.0]));
    assert!(matches!(g.log(bad), Err(Error::Domain { .. })));

    let mut g = Graph::<f64>::new();
    let x = g.param(t(&[4], &[0.3, 1.0, 2.5, 7.0]));
    let l = g.log(x).unwrap();
    let y = g.exp(l);
    let s = g.sum(y, None).unwrap();
    g.backward(s).unwrap();
    for v in g.grad(x).unwrap().data() {
        assert!((v - 1.0).abs() < 1e-6);
    }
}

#[test]
fn elementwise_gradients_match_finite_differences() {
    let mut rng = Rng::new(21);
    for _ in 0..20 {
        let a = random(&mut rng, &[3, 4]);
        let b = random(&mut rng, &[3, 4]);
        let pos = Tensor::new(vec![3, 4], a.data().iter().map(|v| v.abs() + 0.5).collect()).unwrap();
        let report = grad_check(
            |g, v| {
                let s = g.add(v[0], v[1])?;
                let m = g.mul(s, v[1])?;
                let r = g.relu(m);
                let e = g.exp(v[0]);
                let l = g.log(v[2])?;
                let n = g.neg(l);
                let sc = g.scale(e, 0.7);
                let a1 = g.add(r, n)?;
                let a2 = g.add(a1, sc)?;
                Ok(probe(g, a2, 17))
            },
            &[a, b, pos],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }
}

#[test]
fn scalar_broadcast_only() {
    let mut g = Graph::<f64>::new();
    let x = g.param(t(&[2, 2], &[1., 2., 3., 4.]));
    let s = g.param(Tensor::scalar(2.0));
    let y = g.mul(x, s).unwrap();
    assert_eq!(g.value(y).data(), &[2., 4., 6., 8.]);
    let l = g.sum(y, None).unwrap();
    g.backward(l).unwrap();
    assert_eq!(g.grad(s).unwrap().item(), 10.0);

    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[2, 2]));
    let row = g.constant(Tensor::zeros(&[2]));
    assert!(matches!(g.add(x, row), Err(Error::Dimension { .. })));
}

#[test]
fn reductions() {
    let mut g = Graph::<f64>::new();
    let ones = g.param(Tensor::full(&[4], 1.0));
    let s = g.sum(ones, None).unwrap();
    assert_eq!(g.value(s).item(), 4.0);
    let two = g.param(t(&[2], &[2.0, 4.0]));
    let m = g.mean(two, Some(0)).unwrap();
    assert_eq!(g.value(m).item(), 3.0);
    assert!(matches!(g.sum(two, Some(1)), Err(Error::Dimension { .. })));

    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::full(&[5], 3.0));
    let m = g.mean(x, None).unwrap();
    g.backward(m).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[0.2; 5]);

    let mut rng = Rng::new(3);
    let x = random(&mut rng, &[3, 4, 2]);
    for axis in 0..3 {
        let report = grad_check(
            |g, v| {
                let y = g.mean(v[0], Some(axis))?;
                Ok(probe(g, y, 2))
            },
            std::slice::from_ref(&x),
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed);
    }
}

#[test]
fn l2_normalize_cases() {
    let mut g = Graph::<f64>::new();
    let x = g.param(t(&[2, 2], &[3.0, 4.0, 0.6, 0.8]));
    let y = g.l2_normalize(x).unwrap();
    let v = g.value(y).data();
    assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
    assert!((v[2] - 0.6).abs() < 1e-15 && (v[3] - 0.8).abs() < 1e-15);

    let z = g.constant(t(&[1, 2], &[0.0, 0.0]));
    assert!(matches!(g.l2_normalize(z), Err(Error::DegenerateEmbedding { .. })));

    let mut rng = Rng::new(31);
    for _ in 0..20 {
        let x = random(&mut rng, &[4, 6]);
        let report = grad_check(
            |g, v| {
                let y = g.l2_normalize(v[0])?;
                Ok(probe(g, y, 5))
            },
            &[x],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }
}

#[test]
fn backward_simple_sums() {
    let mut g = Graph::<f64>::new();
    let w = g.param(t(&[3], &[1.0, -2.0, 0.5]));
    let s = g.sum(w, None).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(w).unwrap().data(), &[1.0; 3]);

    let mut g = Graph::<f64>::new();
    let w = g.param(t(&[3], &[1.0, -2.0, 0.5]));
    let sq = g.mul(w, w).unwrap();
    let s = g.sum(sq, None).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(w).unwrap().data(), &[2.0, -4.0, 1.0]);
}

#[test]
fn backward_rejects_non_scalar_and_reuse() {
    let mut g = Graph::<f64>::new();
    let w = g.param(t(&[3], &[1.0, 2.0, 3.0]));
    let y = g.relu(w);
    assert!(matches!(g.backward(y), Err(Error::Rank(_))));
    let s = g.sum(y, None).unwrap();
    g.backward(s).unwrap();
    assert!(matches!(g.backward(s), Err(Error::GraphReuse)));
}

#[test]
fn backward_populates_every_reachable_requires_grad_node() {
    let mut g = Graph::<f64>::new();
    let a = g.param(t(&[2], &[1.0, 2.0]));
    let c = g.constant(t(&[2], &[3.0, 4.0]));
    let unused = g.param(t(&[2], &[0.0, 0.0]));
    let m = g.mul(a, c).unwrap();
    let r = g.relu(m);
    let s = g.sum(r, None).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(a).is_some() && g.grad(m).is_some() && g.grad(r).is_some());
    assert!(g.grad(c).is_none());
    assert!(g.grad(unused).is_none());
}

#[test]
fn grad_check_linear_and_kink_exclusion() {
    let mut rng = Rng::new(1);
    let x = random(&mut rng, &[6]);
    let report = grad_check(|g, v| Ok(probe(g, v[0], 3)), &[x], 1e-5, 1e-4).unwrap();
    assert!(report.passed);
    assert!(report.max_rel_err < 1e-8, "{report:?}");

    let x = t(&[3], &[-1.0, 0.0, 2.0]);
    let report = grad_check(
        |g, v| {
            let r = g.relu(v[0]);
            g.sum(r, None)
        },
        &[x],
        1e-5,
        1e-4,
    )
    .unwrap();
    assert_eq!(report.excluded, 1);
    assert_eq!(report.checked, 2);
    assert!(report.passed);
}

#[test]
fn softmax_cross_entropy_gradient() {
    let mut rng = Rng::new(77);
    for _ in 0..20 {
        let logits = random(&mut rng, &[4, 5]);
        let labels: Vec<usize> = (0..4).map(|_| rng.below(5)).collect();
        let report = grad_check(
            |g, v| {
                let ls = g.log_softmax(v[0])?;
                let p = g.pick(ls, labels.clone())?;
                let m = g.mean(p, None)?;
                Ok(g.neg(m))
            },
            &[logits],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }
}

#[test]
fn structural_ops_gradients() {
    let mut rng = Rng::new(99);
    let a = random(&mut rng, &[3, 2]);
    let b = random(&mut rng, &[3, 4]);
    let bias = random(&mut rng, &[2]);
    let img = random(&mut rng, &[2, 3, 2, 2]);
    let report = grad_check(
        |g, v| {
            let ab = g.add_row(v[0], v[2])?;
            let c = g.concat_cols(ab, v[1])?;
            let tr = g.transpose(c)?;
            let mask: Vec<bool> = (0..18).map(|i| i % 5 == 0).collect();
            let mf = g.mask_fill_neg_inf(tr, mask)?;
            let ls = g.log_softmax(mf)?;
            let pk = g.pick(ls, vec![1, 1, 2, 2, 2, 1])?;
            let s1 = g.sum(pk, None)?;
            let pooled = g.global_avg_pool(v[3])?;
            let flat = g.reshape(pooled, &[6])?;
            let s2 = probe(g, flat, 8);
            g.add(s1, s2)
        },
        &[a, b, bias, img],
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn backward_is_linear() {
    // grad(a f + b g) == a grad f + b grad g
    let mut rng = Rng::new(4);
    let x = random(&mut rng, &[3, 3]);
    let grad_of = |ca: f64, cb: f64| {
        let mut g = Graph::<f64>::new();
        let v = g.param(x.clone());
        let e = g.exp(v);
        let f = g.sum(e, None).unwrap();
        let sq = g.mul(v, v).unwrap();
        let m = g.matmul(sq, v).unwrap();
        let h = g.sum(m, None).unwrap();
        let fa = g.scale(f, ca);
        let hb = g.scale(h, cb);
        let l = g.add(fa, hb).unwrap();
        g.backward(l).unwrap();
        g.grad(v).unwrap().to_f64_vec()
    };
    let (a, b) = (1.7, -0.4);
    let combined = grad_of(a, b);
    let gf = grad_of(1.0, 0.0);
    let gh = grad_of(0.0, 1.0);
    for i in 0..9 {
        assert!((combined[i] - (a * gf[i] + b * gh[i])).abs() < 1e-6);
    }
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut rng = Rng::new(12);
        let mut g = Graph::<f32>::new();
        let x = g.param(random(&mut rng, &[4, 3, 6, 6]).cast());
        let k = g.param(random(&mut rng, &[5, 3, 3, 3]).cast());
        let y = g.conv2d(x, k, 2).unwrap();
        g.value(y).clone()
    };
    assert_eq!(run(), run());
}

#[test]
fn verification_suite_covers_every_primitive() {
    let outcomes = semisup::verify::gradient_suite(20, 1).unwrap();
    assert_eq!(
        outcomes.len(),
        semisup::verify::PRIMITIVES.len() + semisup::verify::COMPOSED.len()
    );
    for o in &outcomes {
        assert_eq!(o.instances, 20);
        assert!(o.passed, "{o:?}");
    }
}
