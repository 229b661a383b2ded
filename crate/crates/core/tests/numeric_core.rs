use lexpert_core::gradcheck;
use lexpert_core::{Result, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-4;
const TOL: f64 = 1e-3;

fn rand_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Pushes values away from the relu/abs kink so the difference quotient is smooth.
fn away_from_zero(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// Scalarises any tensor output with fixed random weights so every output
/// element contributes a distinct gradient.
fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(tape.shape(y), &mut rng);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn assert_check(name: &str, inputs: &[Tensor<f64>], f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let report = gradcheck::check(inputs, f, 40, H, &mut rng).unwrap();
    assert!(
        report.passes(TOL),
        "{name}: worst coordinate {:?}",
        report.worst()
    );
}

#[test]
fn gradcheck_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inputs = [rand_tensor(&[3, 4], &mut rng), rand_tensor(&[4, 5], &mut rng)];
    assert_check("matmul", &inputs, |t, v| {
        let y = t.matmul(v[0], v[1])?;
        weighted_sum(t, y, 7)
    });
}

#[test]
fn gradcheck_conv2d_strided_padded() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let inputs = [
        rand_tensor(&[2, 3, 6, 5], &mut rng),
        rand_tensor(&[4, 3, 3, 3], &mut rng),
        rand_tensor(&[4], &mut rng),
    ];
    assert_check("conv2d", &inputs, |t, v| {
        let y = t.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
        weighted_sum(t, y, 8)
    });
    assert_check("conv2d 1x1", &inputs[..2].iter().map(|x| x.clone()).collect::<Vec<_>>(), |t, v| {
        let w = t.slice(v[1], 2, 1, 1)?;
        let w = t.slice(w, 3, 1, 1)?;
        let y = t.conv2d(v[0], w, None, 1, 0)?;
        weighted_sum(t, y, 9)
    });
}

#[test]
fn gradcheck_upsample_concat_slice_reshape() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs = [rand_tensor(&[2, 2, 3, 3], &mut rng), rand_tensor(&[2, 1, 3, 3], &mut rng)];
    assert_check("upsample/concat/slice", &inputs, |t, v| {
        let c = t.concat(&[v[0], v[1]], 1)?;
        let u = t.upsample(c, 2)?;
        let s = t.slice(u, 2, 1, 4)?;
        let r = t.reshape(s, &[2, 3 * 4 * 6])?;
        weighted_sum(t, r, 10)
    });
    assert_check("concat axis0", &inputs[..1].to_vec(), |t, v| {
        let c = t.concat(&[v[0], v[0]], 0)?;
        weighted_sum(t, c, 11)
    });
}

#[test]
fn gradcheck_elementwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let inputs = [
        away_from_zero(&[3, 4], &mut rng),
        rand_tensor(&[3, 4], &mut rng),
        rand_tensor(&[1], &mut rng),
    ];
    assert_check("add/sub/mul/scalar broadcast", &inputs, |t, v| {
        let a = t.add(v[0], v[1])?;
        let b = t.mul(a, v[2])?;
        let c = t.sub(b, v[1])?;
        let d = t.mul(c, v[0])?;
        let e = t.add_scalar(d, 0.3)?;
        let f = t.scale(e, -1.7)?;
        weighted_sum(t, f, 12)
    });
    assert_check("relu/leaky/hinge", &inputs[..1].to_vec(), |t, v| {
        let a = t.relu(v[0])?;
        let b = t.leaky_relu(v[0], 0.2)?;
        let c = t.hinge(v[0])?;
        let s = t.add(a, b)?;
        let s = t.add(s, c)?;
        weighted_sum(t, s, 13)
    });
    assert_check("sigmoid/exp", &inputs[1..2].to_vec(), |t, v| {
        let a = t.sigmoid(v[0])?;
        let b = t.exp(v[0])?;
        let s = t.mul(a, b)?;
        weighted_sum(t, s, 14)
    });
}

#[test]
fn gradcheck_bias_and_pooling() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inputs = [rand_tensor(&[2, 3, 4, 4], &mut rng), rand_tensor(&[3], &mut rng)];
    assert_check("bias_add/gap", &inputs, |t, v| {
        let a = t.bias_add(v[0], v[1])?;
        let p = t.global_avg_pool(a)?;
        weighted_sum(t, p, 15)
    });
    assert_check("instance_norm", &inputs[..1].to_vec(), |t, v| {
        let a = t.instance_norm(v[0], 1e-5)?;
        weighted_sum(t, a, 19)
    });
}

#[test]
fn gradcheck_spectral_normalize() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let inputs = [rand_tensor(&[4, 2, 3, 1], &mut rng)];
    assert_check("spectral_normalize", &inputs, |t, v| {
        let a = t.spectral_normalize(v[0])?;
        weighted_sum(t, a, 20)
    });
}

#[test]
fn spectral_normalize_gives_unit_operator_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let w = Tensor::from_fn(&[6, 10], |_| rng.random_range(-2.0..2.0));
    let sigma = nalgebra::DMatrix::from_row_slice(6, 10, w.data()).singular_values().max();
    let mut t = Tape::<f64>::new();
    let v = t.constant(w.clone());
    let y = t.spectral_normalize(v).unwrap();
    let top = nalgebra::DMatrix::from_row_slice(6, 10, t.value(y).data()).singular_values().max();
    assert!((top - 1.0).abs() < 1e-9, "{top}");
    assert!((t.value(y).data()[0] - w.data()[0] / sigma).abs() < 1e-9);
    let z = t.constant(Tensor::zeros(&[2, 2]));
    assert!(t.spectral_normalize(z).is_err());
}

#[test]
fn instance_norm_planes_have_zero_mean_unit_variance() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = Tensor::from_fn(&[2, 3, 5, 5], |_| rng.random_range(-4.0..9.0));
    let mut t = Tape::<f64>::new();
    let v = t.constant(x);
    let y = t.instance_norm(v, 0.0).unwrap();
    for p in t.value(y).data().chunks(25) {
        let m = p.iter().sum::<f64>() / 25.0;
        let var = p.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 25.0;
        assert!(m.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
    }
}

#[test]
fn gradcheck_reductions_and_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let inputs = [away_from_zero(&[3, 5], &mut rng)];
    assert_check("softmax", &inputs, |t, v| {
        let s = t.softmax(v[0])?;
        weighted_sum(t, s, 16)
    });
    assert_check("log_softmax", &inputs, |t, v| {
        let s = t.log_softmax(v[0])?;
        weighted_sum(t, s, 17)
    });
    assert_check("sum+mean", &inputs, |t, v| {
        let e = t.exp(v[0])?;
        let a = t.sum(e)?;
        let b = t.mean(v[0])?;
        let c = t.mul(a, b)?;
        t.sum(c)
    });
    assert_check("l1", &inputs, |t, v| t.l1(v[0]));
    assert_check("l2", &inputs, |t, v| t.l2_squared(v[0]));
}

#[test]
fn gradcheck_rbf_gram() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let inputs = [Tensor::from_fn(&[5, 3], |_| rng.random_range(-0.8..0.8))];
    assert_check("rbf_gram", &inputs, |t, v| {
        let k = t.rbf_gram(v[0])?;
        weighted_sum(t, k, 18)
    });
}

#[test]
fn composite_network_gradcheck_100_coordinates() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let inputs = [
        rand_tensor(&[2, 1, 8, 8], &mut rng),
        rand_tensor(&[4, 1, 3, 3], &mut rng),
        rand_tensor(&[4], &mut rng),
        rand_tensor(&[2, 4, 3, 3], &mut rng),
        rand_tensor(&[8, 3], &mut rng),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let report = gradcheck::check(
        &inputs,
        |t, v| {
            let a = t.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
            let a = t.leaky_relu(a, 0.2)?;
            let b = t.conv2d(a, v[3], None, 1, 1)?;
            let b = t.sigmoid(b)?;
            let u = t.upsample(b, 2)?;
            let p = t.global_avg_pool(u)?;
            let p = t.reshape(p, &[1, 4])?;
            let q = t.concat(&[p, p], 1)?;
            let logits = t.matmul(q, v[4])?;
            let ls = t.log_softmax(logits)?;
            t.mean(ls)
        },
        100,
        H,
        &mut rng,
    )
    .unwrap();
    assert!(report.passes(TOL), "{:?}", report.worst());
}

fn small_net(t: &mut Tape<f64>, x: Var, w: Var) -> Result<Var> {
    let y = t.conv2d(x, w, None, 1, 1)?;
    let y = t.leaky_relu(y, 0.1)?;
    t.l2_squared(y)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn backward_is_linear_in_the_loss(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xv = rand_tensor(&[1, 2, 4, 4], &mut rng);
        let wv = rand_tensor(&[3, 2, 3, 3], &mut rng);

        let grads_of = |ca: f64, cb: f64| {
            let mut t = Tape::<f64>::new();
            let x = t.param(xv.clone());
            let w = t.param(wv.clone());
            let l1 = small_net(&mut t, x, w).unwrap();
            let s = t.sigmoid(x).unwrap();
            let l2 = t.sum(s).unwrap();
            let l1 = t.scale(l1, ca).unwrap();
            let l2 = t.scale(l2, cb).unwrap();
            let l = t.add(l1, l2).unwrap();
            let g = t.backward(l).unwrap();
            (g.get(x).unwrap().clone(), g.get(w).unwrap().clone())
        };
        let (gx, gw) = grads_of(a, b);
        let (gx1, gw1) = grads_of(1.0, 0.0);
        let (gx2, gw2) = grads_of(0.0, 1.0);
        for (g, (g1, g2)) in [(&gx, (&gx1, &gx2)), (&gw, (&gw1, &gw2))] {
            for ((&v, &v1), &v2) in g.data().iter().zip(g1.data()).zip(g2.data()) {
                let expect = a * v1 + b * v2;
                prop_assert!((v - expect).abs() <= 1e-9 * (1.0 + expect.abs()));
            }
        }
    }

    #[test]
    fn forward_and_backward_are_deterministic(seed in 0u64..1000) {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut t = Tape::<f32>::new();
            let x = t.param(Tensor::from_fn(&[2, 2, 6, 6], |_| rng.random_range(-1.0f32..1.0)));
            let w = t.param(Tensor::from_fn(&[3, 2, 3, 3], |_| rng.random_range(-1.0f32..1.0)));
            let y = t.conv2d(x, w, None, 2, 1).unwrap();
            let y = t.relu(y).unwrap();
            let l = t.l2_squared(y).unwrap();
            let g = t.backward(l).unwrap();
            (t.value(l).clone(), g.get(x).unwrap().clone(), g.get(w).unwrap().clone())
        };
        prop_assert_eq!(run(), run());
    }
}
