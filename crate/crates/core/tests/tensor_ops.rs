use lgm_core::tensor::{
    check_gradients, concat, finite_diff_check, scaled_dot_attention, Conv2dSpec, Tape, Tensor,
};
use rand::Rng;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = lgm_core::rng::seeded(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

const SEEDS: [u64; 3] = [11, 22, 33];

#[test]
fn conv2d_identity_kernel() {
    let tape = Tape::<f64>::new();
    let x = random(&[1, 1, 4, 4], 1);
    let xv = tape.constant(x.clone());
    let w = tape.constant(Tensor::ones(&[1, 1, 1, 1]));
    let b = tape.constant(Tensor::zeros(&[1]));
    let y = xv.conv2d(w, b, Conv2dSpec::POINTWISE).unwrap();
    assert_eq!(*y.value(), x);
}

#[test]
fn conv2d_box_sum() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
    let w = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
    let b = tape.constant(Tensor::zeros(&[1]));
    let y = x.conv2d(w, b, Conv2dSpec::SAME).unwrap();
    assert_eq!(y.shape(), vec![1, 1, 3, 3]);
    assert_eq!(y.value().at(&[0, 0, 1, 1]), 9.0);
    assert_eq!(y.value().at(&[0, 0, 0, 0]), 4.0);
}

#[test]
fn conv2d_shape_errors() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::ones(&[1, 2, 4, 4]));
    let w = tape.constant(Tensor::ones(&[1, 3, 3, 3]));
    let b = tape.constant(Tensor::zeros(&[1]));
    assert!(x.conv2d(w, b, Conv2dSpec::SAME).is_err());
    let w = tape.constant(Tensor::ones(&[1, 2, 2, 2]));
    assert!(x.conv2d(w, b, Conv2dSpec::SAME).is_err());
    let w = tape.constant(Tensor::ones(&[1, 2, 7, 7]));
    assert!(x.conv2d(w, b, Conv2dSpec::POINTWISE).is_err());
}

#[test]
fn conv2d_stride2_gradients_match_finite_differences() {
    for seed in SEEDS {
        let inputs = [random(&[2, 3, 8, 8], seed), random(&[4, 3, 3, 3], seed + 1), random(&[4], seed + 2)];
        assert_eq!(Conv2dSpec::DOWN2.output_extent(8, 3).unwrap(), 4);
        let report = check_gradients(
            |_, v| v[0].conv2d(v[1], v[2], Conv2dSpec::DOWN2).map(|y| y.sum()),
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
        // a non-trivial weighting so that input gradients are not all equal
        let report = check_gradients(
            |_, v| Ok(v[0].conv2d(v[1], v[2], Conv2dSpec::DOWN2)?.square().sum()),
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}

#[test]
fn group_norm_cases() {
    let tape = Tape::<f64>::new();
    let ones = tape.constant(Tensor::ones(&[4]));
    let zeros = tape.constant(Tensor::zeros(&[4]));
    let c = tape.constant(Tensor::full(&[1, 4, 2, 2], 3.0));
    let y = c.group_norm(2, ones, zeros, 1e-5).unwrap();
    assert!(y.value().data().iter().all(|&v| v == 0.0));

    let x = tape.constant(random(&[1, 4, 2, 2], 5));
    let fives = tape.constant(Tensor::full(&[4], 5.0));
    let y = x.group_norm(2, zeros, fives, 1e-5).unwrap();
    assert!(y.value().data().iter().all(|&v| v == 5.0));

    let y = x.group_norm(2, ones, zeros, 1e-12).unwrap();
    for group in y.value().data().chunks(8) {
        let mean = group.iter().sum::<f64>() / 8.0;
        let var = group.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-4, "{mean} {var}");
    }

    assert!(x.group_norm(3, ones, zeros, 1e-5).is_err());
}

#[test]
fn group_norm_gradients() {
    for seed in SEEDS {
        let inputs = [random(&[2, 4, 3, 3], seed), random(&[4], seed + 1), random(&[4], seed + 2)];
        let weights = random(&[2, 4, 3, 3], seed + 3);
        let report = check_gradients(
            |tape, v| {
                let w = tape.constant(weights.clone());
                Ok((v[0].group_norm(2, v[1], v[2], 1e-5)? * w).sum())
            },
            &inputs,
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}

#[test]
fn silu_values_and_gradient() {
    let tape = Tape::<f64>::new();
    let x = tape.param(Tensor::from_f64(&[3], &[0.0, 20.0, -3.0]).unwrap());
    let y = x.silu();
    assert_eq!(y.value().data()[0], 0.0);
    assert!((y.value().data()[1] - 20.0).abs() < 1e-6);
    let g = tape.backward(y.sum()).unwrap().get(x);
    assert_eq!(g.data()[0], 0.5);
    for seed in SEEDS {
        let err = finite_diff_check(|_, x| Ok(x.silu().sum()), &random(&[16], seed), 1e-6).unwrap();
        assert!(err < 1e-6, "{err}");
    }
}

#[test]
fn softplus_is_overflow_safe() {
    let tape = Tape::<f64>::new();
    let y = tape.constant(Tensor::from_f64(&[3], &[0.0, -50.0, 50.0]).unwrap()).softplus();
    let v = y.value();
    assert!((v.data()[0] - std::f64::consts::LN_2).abs() < 1e-6);
    assert!(v.data()[1] < 1e-20 && v.data()[1] >= 0.0);
    assert!((v.data()[2] - 50.0).abs() < 1e-6);
    let t32 = Tape::<f32>::new();
    let y = t32.constant(Tensor::from_f64(&[2], &[100.0, -100.0]).unwrap()).softplus();
    assert!(y.value().all_finite());
}

#[test]
fn elementwise_ops_pass_finite_differences() {
    for seed in SEEDS {
        let a = random(&[3, 4], seed);
        let b = random(&[3, 4], seed + 7).map(|v| v + 2.5);
        let row = random(&[4], seed + 9);
        let cases: Vec<(&str, f64)> = vec![
            ("add", check_gradients(|_, v| Ok((v[0] + v[1]).square().sum()), &[a.clone(), b.clone()], 1e-6).unwrap().max_rel_error),
            ("sub", check_gradients(|_, v| Ok((v[0] - v[1]).square().sum()), &[a.clone(), b.clone()], 1e-6).unwrap().max_rel_error),
            ("mul", check_gradients(|_, v| Ok((v[0] * v[1]).sum()), &[a.clone(), b.clone()], 1e-6).unwrap().max_rel_error),
            ("div", check_gradients(|_, v| Ok((v[0] / v[1]).sum()), &[a.clone(), b.clone()], 1e-6).unwrap().max_rel_error),
            ("broadcast", check_gradients(|_, v| Ok((v[0] * v[1]).square().sum()), &[a.clone(), row.clone()], 1e-6).unwrap().max_rel_error),
            ("sigmoid", finite_diff_check(|_, x| Ok(x.sigmoid().square().sum()), &a, 1e-6).unwrap()),
            ("tanh", finite_diff_check(|_, x| Ok(x.tanh().square().sum()), &a, 1e-6).unwrap()),
            ("exp", finite_diff_check(|_, x| Ok(x.exp().sum()), &a, 1e-6).unwrap()),
            ("ln", finite_diff_check(|_, x| Ok(x.ln().sum()), &b, 1e-6).unwrap()),
            ("sqrt", finite_diff_check(|_, x| Ok(x.sqrt().sum()), &b, 1e-6).unwrap()),
            ("mean", finite_diff_check(|_, x| Ok(x.square().mean()), &a, 1e-6).unwrap()),
            ("softmax", finite_diff_check(|_, x| Ok(x.softmax().square().sum()), &a, 1e-6).unwrap()),
        ];
        for (name, err) in cases {
            assert!(err < 1e-4, "{name}: {err}");
        }
    }
}

#[test]
fn clamp_gradient_is_zero_outside() {
    let tape = Tape::<f64>::new();
    let x = tape.param(Tensor::from_f64(&[4], &[-2.0, -1.0, 0.5, 1.5]).unwrap());
    let y = x.clamp(-1.0, 1.0);
    assert_eq!(y.value().data(), &[-1.0, -1.0, 0.5, 1.0]);
    let g = tape.backward(y.sum()).unwrap().get(x);
    assert_eq!(g.data(), &[0.0, 1.0, 1.0, 0.0]);
}

#[test]
fn shape_ops_pass_finite_differences() {
    for seed in SEEDS {
        let a = random(&[2, 3, 4], seed);
        let b = random(&[2, 2, 4], seed + 1);
        let w = random(&[2, 5, 4], seed + 2);
        let err = check_gradients(
            |tape, v| {
                let c = concat(&[v[0], v[1]], 1)?;
                let p = c.permute(&[2, 0, 1])?.reshape(&[4, 10])?;
                let s = p.slice(1, 3, 8)?;
                let wv = tape.constant(w.clone().reshaped(&[2, 5, 4])?.reshaped(&[4, 10])?);
                Ok((s * wv.slice(1, 0, 5)?).sum())
            },
            &[a.clone(), b.clone()],
            1e-6,
        )
        .unwrap();
        assert!(err.max_rel_error < 1e-4, "{err:?}");
    }
}

#[test]
fn matmul_variants_pass_finite_differences() {
    for seed in SEEDS {
        let a = random(&[2, 3, 4], seed);
        let b = random(&[2, 4, 5], seed + 1);
        let bt = random(&[2, 5, 4], seed + 2);
        let at = random(&[2, 4, 3], seed + 3);
        for (ta, tb) in [(false, false), (false, true), (true, false), (true, true)] {
            let lhs = if ta { at.clone() } else { a.clone() };
            let rhs = if tb { bt.clone() } else { b.clone() };
            let r = check_gradients(
                |_, v| Ok(v[0].matmul_ex(v[1], ta, tb)?.square().sum()),
                &[lhs, rhs],
                1e-6,
            )
            .unwrap();
            assert!(r.max_rel_error < 1e-4, "ta={ta} tb={tb} {r:?}");
        }
        let m2 = check_gradients(
            |_, v| Ok(v[0].matmul(v[1])?.square().sum()),
            &[random(&[3, 4], seed), random(&[4, 2], seed + 4)],
            1e-6,
        )
        .unwrap();
        assert!(m2.max_rel_error < 1e-4);
    }
}

#[test]
fn matmul_matches_naive_product() {
    let a = random(&[3, 4], 1);
    let b = random(&[4, 2], 2);
    let tape = Tape::<f64>::new();
    let c = tape.constant(a.clone()).matmul(tape.constant(b.clone())).unwrap();
    for i in 0..3 {
        for j in 0..2 {
            let want: f64 = (0..4).map(|k| a.at(&[i, k]) * b.at(&[k, j])).sum();
            assert!((c.value().at(&[i, j]) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn resize_ops() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_f64(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
    let up = x.resize_nearest(4, 4).unwrap();
    assert_eq!(up.value().at(&[0, 0, 3, 3]), 4.0);
    assert_eq!(up.value().at(&[0, 0, 1, 2]), 2.0);
    let same = x.resize_bilinear(2, 2).unwrap();
    assert_eq!(*same.value(), *x.value());
    for seed in SEEDS {
        let r = random(&[1, 2, 3, 5], seed);
        let e1 = finite_diff_check(|_, x| Ok(x.resize_nearest(6, 10)?.square().sum()), &r, 1e-6).unwrap();
        let e2 = finite_diff_check(|_, x| Ok(x.resize_bilinear(7, 4)?.square().sum()), &r, 1e-6).unwrap();
        assert!(e1 < 1e-4 && e2 < 1e-4, "{e1} {e2}");
    }
}

#[test]
fn attention_special_cases() {
    let tape = Tape::<f64>::new();
    let q = tape.constant(random(&[2, 1, 3], 1));
    let k = tape.constant(random(&[2, 1, 3], 2));
    let v = tape.constant(random(&[2, 1, 3], 3));
    let o = scaled_dot_attention(q, k, v).unwrap();
    assert_eq!(*o.value(), *v.value());

    let q0 = tape.constant(Tensor::zeros(&[1, 4, 3]));
    let k = tape.constant(random(&[1, 4, 3], 4));
    let vv = random(&[1, 4, 3], 5);
    let o = scaled_dot_attention(q0, k, tape.constant(vv.clone())).unwrap();
    for t in 0..4 {
        for d in 0..3 {
            let mean: f64 = (0..4).map(|r| vv.at(&[0, r, d])).sum::<f64>() / 4.0;
            assert!((o.value().at(&[0, t, d]) - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn softmax_rows_sum_to_one() {
    let tape = Tape::<f32>::new();
    let x = tape.constant(random(&[5, 7], 3).map(|v| v * 30.0).cast::<f32>());
    for row in x.softmax().value().data().chunks(7) {
        assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn attention_gradients() {
    for seed in SEEDS {
        let inputs = [random(&[1, 4, 8], seed), random(&[1, 4, 8], seed + 1), random(&[1, 4, 8], seed + 2)];
        let r = check_gradients(
            |_, v| Ok(scaled_dot_attention(v[0], v[1], v[2])?.square().sum()),
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}

#[test]
fn composed_chain_gradient() {
    for seed in SEEDS {
        let inputs = [
            random(&[1, 2, 6, 6], seed),
            random(&[4, 2, 3, 3], seed + 1),
            random(&[4], seed + 2),
            random(&[4], seed + 3).map(|v| v + 1.0),
            random(&[4], seed + 4),
        ];
        let r = check_gradients(
            |_, v| {
                let h = v[0].conv2d(v[1], v[2], Conv2dSpec::SAME)?;
                Ok(h.group_norm(2, v[3], v[4], 1e-5)?.silu().sum())
            },
            &inputs,
            1e-6,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let tape = Tape::<f32>::new();
        let x = tape.constant(random(&[2, 3, 9, 9], 4).cast());
        let w = tape.constant(random(&[5, 3, 3, 3], 5).cast());
        let b = tape.constant(random(&[5], 6).cast());
        let y = x.conv2d(w, b, Conv2dSpec::DOWN2).unwrap();
        (*y.value()).clone()
    };
    assert_eq!(run().data(), run().data());
}
