use protodepth_tensor::{grad_check, Result, Tape, Tensor, TensorError, Var, GRAD_CHECK_EPS, GRAD_CHECK_TOL};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn t(shape: &[usize], data: &[f32]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

/// Random input bounded away from zero so kinked ops stay differentiable.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut rng(seed)).map(|v| v.signum() * (0.1 + v.abs()))
}

/// `sum(out ⊙ R)` for a fixed random `R`, so every output coordinate matters.
fn weighted_sum(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let r = Tensor::randn(tape.shape(out), 1.0, &mut rng(seed));
    let r = tape.constant(r);
    tape.dot(out, r)
}

/// Like [`weighted_sum`] with strictly positive weights. Central differences
/// in f32 carry ~1e-4 absolute noise at eps = 1e-3, so ops whose gradient is
/// a signed sum of many terms are checked on inputs that avoid cancellation.
fn positive_weighted_sum(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let r = Tensor::uniform(tape.shape(out), 0.5, 1.5, &mut rng(seed));
    let r = tape.constant(r);
    tape.dot(out, r)
}

fn check(name: &str, x: &Tensor, f: impl Fn(&mut Tape, Var) -> Result<Var>) {
    let report = grad_check(f, x, GRAD_CHECK_EPS).unwrap();
    assert!(
        report.passes(GRAD_CHECK_TOL),
        "{name}: max relative error {} at {} (analytic {}, numeric {})",
        report.max_rel_error,
        report.worst_index,
        report.analytic.data()[report.worst_index],
        report.numeric[report.worst_index]
    );
}

#[test]
fn matmul_identity_and_inner_product() {
    let mut tape = Tape::new();
    let i2 = tape.constant(Tensor::eye(2));
    let m = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
    let p = tape.matmul(i2, m).unwrap();
    assert_eq!(tape.value(p).data(), &[1., 2., 3., 4.]);

    let a = tape.constant(t(&[1, 2], &[1., 2.]));
    let b = tape.constant(t(&[2, 1], &[3., 4.]));
    let ab = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(ab).data(), &[11.]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    match tape.matmul(a, b) {
        Err(TensorError::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected shape error, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let a = Tensor::randn(&[3, 3], 1.0, &mut rng(1));
    let b = Tensor::randn(&[3, 3], 1.0, &mut rng(2));
    check("matmul lhs", &a, |tape, x| {
        let bv = tape.constant(b.clone());
        let p = tape.matmul(x, bv)?;
        Ok(tape.sum(p))
    });
    check("matmul rhs", &b, |tape, x| {
        let av = tape.constant(a.clone());
        let p = tape.matmul(av, x)?;
        weighted_sum(tape, p, 3)
    });
}

#[test]
fn conv2d_identity_and_box_sum() {
    let mut tape = Tape::new();
    let x = Tensor::randn(&[4, 5, 1], 1.0, &mut rng(4));
    let xv = tape.constant(x.clone());
    let k = tape.constant(Tensor::ones(&[1, 1, 1, 1]));
    let y = tape.conv2d(xv, k, 1, 0).unwrap();
    assert!(tape.value(y).bitwise_eq(&x));

    let ones = tape.constant(Tensor::ones(&[3, 3, 1]));
    let k3 = tape.constant(Tensor::ones(&[3, 3, 1, 1]));
    let y = tape.conv2d(ones, k3, 1, 1).unwrap();
    assert_eq!(tape.value(y).at(&[1, 1, 0]), 9.0);
    assert_eq!(tape.value(y).at(&[0, 0, 0]), 4.0);
}

#[test]
fn conv2d_output_extents_and_degenerate_shapes() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[8, 12, 2]));
    let k = tape.constant(Tensor::zeros(&[3, 3, 2, 4]));
    let y = tape.conv2d(x, k, 2, 1).unwrap();
    assert_eq!(tape.shape(y), &[4, 6, 4]);

    let tiny = tape.constant(Tensor::zeros(&[1, 1, 2]));
    let k5 = tape.constant(Tensor::zeros(&[5, 5, 2, 1]));
    assert!(matches!(tape.conv2d(tiny, k5, 1, 0), Err(TensorError::Degenerate { .. })));
    let even = tape.constant(Tensor::zeros(&[2, 2, 2, 1]));
    assert!(tape.conv2d(x, even, 1, 0).is_err());
}

#[test]
fn conv2d_gradients_match_finite_differences() {
    let x = Tensor::uniform(&[5, 5, 2], 0.1, 1.0, &mut rng(5));
    let k = Tensor::uniform(&[3, 3, 2, 3], 0.1, 1.0, &mut rng(6));
    for stride in [1, 2] {
        check("conv2d input", &x, |tape, xv| {
            let kv = tape.constant(k.clone());
            let y = tape.conv2d(xv, kv, stride, 1)?;
            positive_weighted_sum(tape, y, 7)
        });
        check("conv2d kernel", &k, |tape, kv| {
            let xv = tape.constant(x.clone());
            let y = tape.conv2d(xv, kv, stride, 1)?;
            positive_weighted_sum(tape, y, 8)
        });
    }
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[3, 3], &[0., 0., 0., 1., 2., 3., -4., 7., 0.5]));
    let y = tape.softmax_rows(x).unwrap();
    let y = tape.value(y).clone();
    for v in &y.data()[..3] {
        assert!((v - 1.0 / 3.0).abs() < 1e-6);
    }
    let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).collect();
    let z: f64 = e.iter().sum();
    for (j, ej) in e.iter().enumerate() {
        assert!((y.data()[3 + j] as f64 - ej / z).abs() < 1e-6);
    }

    let single = tape.constant(t(&[2, 1], &[-3.5, 1e4]));
    let s = tape.softmax_rows(single).unwrap();
    assert_eq!(tape.value(s).data(), &[1.0, 1.0]);

    let nan = tape.constant(t(&[1, 2], &[f32::NAN, 0.0]));
    assert!(matches!(tape.softmax_rows(nan), Err(TensorError::NonFinite { .. })));
}

#[test]
fn softmax_gradient_matches_finite_differences() {
    let x = Tensor::randn(&[4, 5], 0.5, &mut rng(9));
    // Weights spread far apart keep every coordinate's gradient away from zero.
    let ramp = Tensor::new(vec![4, 5], (0..20).map(|i| ((i % 5) as f32).powi(3)).collect()).unwrap();
    check("softmax_rows", &x, |tape, xv| {
        let y = tape.softmax_rows(xv)?;
        let r = tape.constant(ramp.clone());
        tape.dot(y, r)
    });
}

#[test]
fn grad_check_reference_functions() {
    let x = Tensor::randn(&[6], 1.0, &mut rng(11));
    let lin = grad_check(|tape, v| Ok(tape.sum(v)), &x, GRAD_CHECK_EPS).unwrap();
    assert!(lin.analytic.data().iter().all(|&g| g == 1.0));
    assert!(lin.max_rel_error < 1e-6, "{}", lin.max_rel_error);

    let q = grad_check(
        |tape, v| {
            let sq = tape.mul(v, v)?;
            Ok(tape.sum(sq))
        },
        &Tensor::from_vec(vec![1.0, 2.0]),
        GRAD_CHECK_EPS,
    )
    .unwrap();
    assert_eq!(q.analytic.data(), &[2.0, 4.0]);
    assert!(q.max_rel_error < 1e-3);

    let non_scalar = grad_check(|_, v| Ok(v), &x, GRAD_CHECK_EPS);
    assert!(matches!(non_scalar, Err(TensorError::Contract(_))));
}

#[test]
fn every_elementwise_op_passes_grad_check() {
    let x = away_from_zero(&[3, 4, 2], 12);
    let y = away_from_zero(&[3, 4, 2], 13);
    let v = away_from_zero(&[2], 14);
    type Op = Box<dyn Fn(&mut Tape, Var, Var) -> Result<Var>>;
    let binary: Vec<(&str, Op)> = vec![
        ("add", Box::new(|t, a, b| t.add(a, b))),
        ("sub", Box::new(|t, a, b| t.sub(a, b))),
        ("mul", Box::new(|t, a, b| t.mul(a, b))),
        ("div", Box::new(|t, a, b| t.div(a, b))),
    ];
    for (name, op) in &binary {
        check(name, &x, |tape, xv| {
            let yv = tape.constant(y.clone());
            let o = op(tape, xv, yv)?;
            weighted_sum(tape, o, 15)
        });
        check(name, &y, |tape, yv| {
            let xv = tape.constant(x.clone());
            let o = op(tape, xv, yv)?;
            weighted_sum(tape, o, 16)
        });
    }
    type Unary = Box<dyn Fn(&mut Tape, Var) -> Result<Var>>;
    let unary: Vec<(&str, Unary)> = vec![
        ("scale", Box::new(|t, a| Ok(t.scale(a, -1.7)))),
        ("add_scalar", Box::new(|t, a| Ok(t.add_scalar(a, 0.3)))),
        ("rsub_scalar", Box::new(|t, a| Ok(t.rsub_scalar(1.0, a)))),
        ("abs", Box::new(|t, a| Ok(t.abs(a)))),
        ("exp", Box::new(|t, a| Ok(t.exp(a)))),
        ("leaky_relu", Box::new(|t, a| Ok(t.leaky_relu(a, 0.1)))),
        ("sigmoid", Box::new(|t, a| Ok(t.sigmoid(a)))),
        ("sqrt", Box::new(|t, a| {
            let sq = t.mul(a, a)?;
            t.sqrt(sq)
        })),
        ("upsample2x", Box::new(|t, a| t.upsample2x(a))),
        ("avg_pool3x3", Box::new(|t, a| t.avg_pool3x3(a))),
        ("forward_diff x", Box::new(|t, a| t.forward_diff(a, 1))),
        ("forward_diff y", Box::new(|t, a| t.forward_diff(a, 0))),
        ("mean_last_axis", Box::new(|t, a| t.mean_last_axis(a))),
        ("global_avg_pool", Box::new(|t, a| t.global_avg_pool(a))),
        ("reshape", Box::new(|t, a| t.reshape(a, &[12, 2]))),
        ("mean", Box::new(|t, a| Ok(t.mean(a)))),
        ("l2_norm", Box::new(|t, a| Ok(t.l2_norm(a)))),
        ("concat", Box::new(|t, a| {
            let b = t.scale(a, 2.0);
            t.concat_channels(&[a, b, a])
        })),
    ];
    for (name, op) in &unary {
        check(name, &x, |tape, xv| {
            let o = op(tape, xv)?;
            weighted_sum(tape, o, 17)
        });
    }
    check("add_channel", &v, |tape, vv| {
        let xv = tape.constant(x.clone());
        let o = tape.add_channel(xv, vv)?;
        weighted_sum(tape, o, 18)
    });
    check("mul_channel vec", &v, |tape, vv| {
        let xv = tape.constant(x.clone());
        let o = tape.mul_channel(xv, vv)?;
        weighted_sum(tape, o, 19)
    });
    check("mul_channel x", &x, |tape, xv| {
        let vv = tape.constant(v.clone());
        let o = tape.mul_channel(xv, vv)?;
        weighted_sum(tape, o, 20)
    });
    let m = away_from_zero(&[3, 5], 21);
    check("transpose", &m, |tape, mv| {
        let o = tape.transpose(mv)?;
        weighted_sum(tape, o, 22)
    });
}

#[test]
fn detach_blocks_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(vec![1.0, -2.0, 3.0]));
    let d = tape.detach(x);
    assert!(tape.value(d).bitwise_eq(tape.value(x)));
    let sq = tape.mul(d, d).unwrap();
    let loss = tape.sum(sq);
    let grads = tape.backward(loss).unwrap();
    let gx = grads.wrt_or_zeros(x, &[3]);
    assert!(gx.data().iter().all(|&g| g == 0.0));
}

#[test]
fn frozen_inputs_record_no_closures() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::ones(&[2, 2]));
    let b = tape.constant(Tensor::ones(&[2, 2]));
    let c = tape.matmul(a, b).unwrap();
    assert!(!tape.requires_grad(c));
    assert_eq!(tape.recorded_ops(), 0);

    let l = tape.leaf(Tensor::ones(&[2, 2]));
    let _ = tape.add(c, l).unwrap();
    assert_eq!(tape.recorded_ops(), 1);
}

#[test]
fn backward_is_bitwise_repeatable() {
    let x = Tensor::randn(&[6, 6, 3], 1.0, &mut rng(23));
    let k = Tensor::randn(&[3, 3, 3, 4], 0.3, &mut rng(24));
    let run = || {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let kv = tape.leaf(k.clone());
        let y = tape.conv2d(xv, kv, 1, 1).unwrap();
        let y = tape.leaky_relu(y, 0.2);
        let up = tape.upsample2x(y).unwrap();
        let l = tape.mean(up);
        let g = tape.backward(l).unwrap();
        (tape.value(l).clone(), g.get(xv).unwrap().clone(), g.get(kv).unwrap().clone())
    };
    let (l1, gx1, gk1) = run();
    let (l2, gx2, gk2) = run();
    assert!(l1.bitwise_eq(&l2));
    assert!(gx1.bitwise_eq(&gx2));
    assert!(gk1.bitwise_eq(&gk2));
}

#[test]
fn backward_requires_scalar() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::ones(&[2]));
    assert!(tape.backward(x).is_err());
}
