use lexpert_core::gradcheck;
use lexpert_core::hsic::{hsic_unbiased, hsic_values, permutation_test};
use lexpert_core::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn normal_rows(m: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..m)
        .map(|_| (0..d).map(|_| StandardNormal.sample(rng)).collect())
        .collect()
}

#[test]
fn orthogonal_unit_vectors_hand_value() {
    // every off-diagonal kernel entry is q = exp(-1): tr = 12q², sums = 144q²/6,
    // cross = 2/2·4·(3q)² = 36q², so the bracket is 12q² + 24q² − 36q² = 0
    let e: Vec<Vec<f64>> = (0..4)
        .map(|i| (0..4).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    assert!(hsic_values(&e, &e).unwrap().abs() < 1e-12);
}

#[test]
fn one_dimensional_hand_value() {
    // a = b = [0, 1, 2, 3]; pair distances 1 (×3), 2 (×2), 3 (×1)
    let (p, q, r) = ((-0.5f64).exp(), (-2.0f64).exp(), (-4.5f64).exp());
    let trace = 2.0 * (3.0 * p * p + 2.0 * q * q + r * r);
    let s = 2.0 * (3.0 * p + 2.0 * q + r);
    let rows = 2.0 * (p + q + r).powi(2) + 2.0 * (2.0 * p + q).powi(2);
    let expected = (trace + s * s / 6.0 - rows) / 4.0;
    assert!(expected > 0.0);

    let a: Vec<Vec<f64>> = (0..4).map(|i| vec![i as f64]).collect();
    let got = hsic_values(&a, &a).unwrap();
    assert!((got - expected).abs() < 1e-6, "{got} vs {expected}");
}

#[test]
fn independent_samples_are_unbiased() {
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    let vals: Vec<f64> = (0..500)
        .map(|_| {
            let a = normal_rows(32, 2, &mut rng);
            let b = normal_rows(32, 2, &mut rng);
            hsic_values(&a, &b).unwrap()
        })
        .collect();
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let se = (var / n).sqrt();
    assert!(mean.abs() < 3.0 * se, "mean {mean} se {se}");
}

#[test]
fn dependent_samples_exceed_permutation_null() {
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    let mut hits = 0;
    for _ in 0..200 {
        let a = normal_rows(32, 2, &mut rng);
        let test = permutation_test(&a, &a, 200, &mut rng).unwrap();
        if test.exceeds(0.95) {
            hits += 1;
        }
    }
    assert!(hits >= 190, "only {hits}/200 exceeded the null 95th percentile");
}

#[test]
fn symmetric_in_its_arguments() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let a = normal_rows(10, 3, &mut rng);
        let b = normal_rows(10, 5, &mut rng);
        let (x, y) = (hsic_values(&a, &b).unwrap(), hsic_values(&b, &a).unwrap());
        assert!((x - y).abs() <= 1e-15 * x.abs().max(1.0));
    }
}

#[test]
fn gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let draw = |rng: &mut ChaCha8Rng, d: usize| {
        let rows = normal_rows(8, d, rng);
        Tensor::new(vec![8, d], rows.concat()).unwrap()
    };
    let inputs = [draw(&mut rng, 3), draw(&mut rng, 4)];
    let report = gradcheck::check(
        &inputs,
        |t: &mut Tape<f64>, v| hsic_unbiased(t, v[0], v[1]),
        60,
        1e-4,
        &mut rng,
    )
    .unwrap();
    assert!(report.passes(1e-3), "{:?}", report.worst());
}
