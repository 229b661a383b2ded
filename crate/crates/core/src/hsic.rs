//! Unbiased Hilbert–Schmidt independence criterion with RBF kernels.
//!
//! For kernel matrices with zeroed diagonals `K̃`, `L̃` over `m` paired
//! samples:
//!
//! ```text
//! HSIC₁ = 1/(m(m−3)) · [ tr(K̃L̃ᵀ) + (1ᵀK̃1)(1ᵀL̃1)/((m−1)(m−2)) − 2/(m−2)·1ᵀK̃L̃ᵀ1 ]
//! ```
//!
//! with `k(x, y) = exp(−½‖x − y‖²)`. The estimate may be negative.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::registry::Registry;
use crate::tensor::{Float, Tensor};

pub const MIN_BATCH: usize = 4;

fn check_batch(m: usize) -> Result<()> {
    if m < MIN_BATCH {
        return Err(Error::contract(format!(
            "unbiased HSIC divides by m(m−3) and needs a batch of at least {MIN_BATCH}, got m={m}"
        )));
    }
    Ok(())
}

/// HSIC₁ between the rows of `a` (`[m, Da]`) and `b` (`[m, Db]`).
pub fn hsic_unbiased<T: Float>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let (sa, sb) = (tape.shape(a).to_vec(), tape.shape(b).to_vec());
    if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
        return Err(Error::shape("hsic", &sa, &sb));
    }
    check_batch(sa[0])?;
    let ka = tape.rbf_gram(a)?;
    let kb = tape.rbf_gram(b)?;
    hsic_from_grams(tape, ka, kb)
}

/// HSIC₁ from two precomputed off-diagonal kernel matrices (`[m, m]`).
pub fn hsic_from_grams<T: Float>(tape: &mut Tape<T>, ka: Var, kb: Var) -> Result<Var> {
    let (sa, sb) = (tape.shape(ka).to_vec(), tape.shape(kb).to_vec());
    if sa != sb || sa.len() != 2 || sa[0] != sa[1] {
        return Err(Error::shape("hsic grams", &sa, &sb));
    }
    let m = sa[0];
    check_batch(m)?;
    let mf = m as f64;

    let prod = tape.mul(ka, kb)?;
    let trace = tape.sum(prod)?;

    let sum_a = tape.sum(ka)?;
    let sum_b = tape.sum(kb)?;
    let sums = tape.mul(sum_a, sum_b)?;
    let sums = tape.scale(sums, T::of(1.0 / ((mf - 1.0) * (mf - 2.0))))?;

    let ones = tape.constant(Tensor::full(&[m, 1], T::one()));
    let row_a = tape.matmul(ka, ones)?;
    let row_b = tape.matmul(kb, ones)?;
    let cross = tape.mul(row_a, row_b)?;
    let cross = tape.sum(cross)?;
    let cross = tape.scale(cross, T::of(-2.0 / (mf - 2.0)))?;

    let total = tape.add(trace, sums)?;
    let total = tape.add(total, cross)?;
    tape.scale(total, T::of(1.0 / (mf * (mf - 3.0))))
}

/// Off-diagonal RBF Gram matrix of plain `f64` rows, row-major `m × m`.
pub fn gram_values(rows: &[Vec<f64>]) -> Vec<f64> {
    let m = rows.len();
    let mut k = vec![0.0; m * m];
    for i in 0..m {
        for j in (i + 1)..m {
            let d2: f64 = rows[i]
                .iter()
                .zip(&rows[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            let v = (-0.5 * d2).exp();
            k[i * m + j] = v;
            k[j * m + i] = v;
        }
    }
    k
}

/// HSIC₁ from Gram matrices, with `kb` indexed through the permutation `perm`.
pub fn hsic_gram_values(ka: &[f64], kb: &[f64], m: usize, perm: Option<&[usize]>) -> Result<f64> {
    check_batch(m)?;
    let idx = |i: usize| perm.map_or(i, |p| p[i]);
    let mf = m as f64;
    let (mut trace, mut sa, mut sb, mut cross) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..m {
        let (mut ra, mut rb) = (0.0, 0.0);
        for j in 0..m {
            let a = ka[i * m + j];
            let b = kb[idx(i) * m + idx(j)];
            trace += a * b;
            ra += a;
            rb += b;
        }
        sa += ra;
        sb += rb;
        cross += ra * rb;
    }
    Ok((trace + sa * sb / ((mf - 1.0) * (mf - 2.0)) - 2.0 / (mf - 2.0) * cross) / (mf * (mf - 3.0)))
}

/// HSIC₁ of two plain sample sets (no tape).
pub fn hsic_values(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("hsic", &[a.len()], &[b.len()]));
    }
    hsic_gram_values(&gram_values(a), &gram_values(b), a.len(), None)
}

/// Result of a permutation test of independence.
#[derive(Clone, Debug)]
pub struct PermutationTest {
    pub statistic: f64,
    pub null: Vec<f64>,
}

impl PermutationTest {
    /// Empirical `q`-quantile of the null distribution.
    pub fn null_quantile(&self, q: f64) -> f64 {
        let mut v = self.null.clone();
        v.sort_by(f64::total_cmp);
        let idx = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1;
        v[idx]
    }

    pub fn exceeds(&self, q: f64) -> bool {
        self.statistic > self.null_quantile(q)
    }
}

/// Permutation null for HSIC₁: `b`'s rows are shuffled `permutations` times.
pub fn permutation_test(
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    permutations: usize,
    rng: &mut impl Rng,
) -> Result<PermutationTest> {
    let m = a.len();
    if b.len() != m {
        return Err(Error::shape("hsic", &[m], &[b.len()]));
    }
    let (ka, kb) = (gram_values(a), gram_values(b));
    let statistic = hsic_gram_values(&ka, &kb, m, None)?;
    let mut perm: Vec<usize> = (0..m).collect();
    let mut null = Vec::with_capacity(permutations);
    for _ in 0..permutations {
        perm.shuffle(rng);
        null.push(hsic_gram_values(&ka, &kb, m, Some(&perm))?);
    }
    Ok(PermutationTest { statistic, null })
}

/// How a `[B, d, w, h]` feature map is turned into one vector per sample
/// before the kernel is applied. Both precisions are needed: 32-bit for
/// training, 64-bit for gradient checks.
pub trait FeatureMap: Send + Sync {
    fn name(&self) -> &'static str;

    fn vectorize_f32(&self, tape: &mut Tape<f32>, features: Var) -> Result<Var>;

    fn vectorize_f64(&self, tape: &mut Tape<f64>, features: Var) -> Result<Var>;
}

/// Precision-generic dispatch onto a [`FeatureMap`].
pub trait MapFloat: Float {
    fn vectorize(map: &dyn FeatureMap, tape: &mut Tape<Self>, features: Var) -> Result<Var>;
}

impl MapFloat for f32 {
    fn vectorize(map: &dyn FeatureMap, tape: &mut Tape<f32>, features: Var) -> Result<Var> {
        map.vectorize_f32(tape, features)
    }
}

impl MapFloat for f64 {
    fn vectorize(map: &dyn FeatureMap, tape: &mut Tape<f64>, features: Var) -> Result<Var> {
        map.vectorize_f64(tape, features)
    }
}

/// Full flattening to `d·w·h` values, no normalisation.
#[derive(Clone, Copy, Debug, Default)]
pub struct Flatten;

/// Spatial average to `d` values.
#[derive(Clone, Copy, Debug, Default)]
pub struct SpatialMean;

fn flatten<T: Float>(tape: &mut Tape<T>, features: Var) -> Result<Var> {
    let s = tape.shape(features).to_vec();
    let rest = s[1..].iter().product();
    tape.reshape(features, &[s[0], rest])
}

fn spatial_mean<T: Float>(tape: &mut Tape<T>, features: Var) -> Result<Var> {
    if tape.shape(features).len() == 4 {
        tape.global_avg_pool(features)
    } else {
        flatten(tape, features)
    }
}

impl FeatureMap for Flatten {
    fn name(&self) -> &'static str {
        "flatten"
    }

    fn vectorize_f32(&self, tape: &mut Tape<f32>, features: Var) -> Result<Var> {
        flatten(tape, features)
    }

    fn vectorize_f64(&self, tape: &mut Tape<f64>, features: Var) -> Result<Var> {
        flatten(tape, features)
    }
}

impl FeatureMap for SpatialMean {
    fn name(&self) -> &'static str {
        "pool"
    }

    fn vectorize_f32(&self, tape: &mut Tape<f32>, features: Var) -> Result<Var> {
        spatial_mean(tape, features)
    }

    fn vectorize_f64(&self, tape: &mut Tape<f64>, features: Var) -> Result<Var> {
        spatial_mean(tape, features)
    }
}

pub fn feature_maps() -> Registry<dyn FeatureMap> {
    let mut reg: Registry<dyn FeatureMap> = Registry::new("HSIC feature map");
    reg.register("flatten", Arc::new(Flatten));
    reg.register("pool", Arc::new(SpatialMean));
    reg
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn on_tape(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
        let mut tape = Tape::<f64>::new();
        let ta = Tensor::new(vec![a.len(), a[0].len()], a.concat())?;
        let tb = Tensor::new(vec![b.len(), b[0].len()], b.concat())?;
        let (va, vb) = (tape.constant(ta), tape.constant(tb));
        let h = hsic_unbiased(&mut tape, va, vb)?;
        Ok(tape.value(h).item())
    }

    #[test]
    fn small_batches_rejected() {
        let a = vec![vec![0.0]; 3];
        let err = on_tape(&a, &a).unwrap_err().to_string();
        assert!(err.contains("m(m−3)"), "{err}");
        assert!(hsic_values(&a, &a).is_err());
        let b = vec![vec![0.0]; 4];
        assert!(matches!(hsic_values(&a, &b), Err(Error::Shape { .. })));
    }

    #[test]
    fn constant_batch_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = vec![vec![0.7, -0.2]; 9];
        let b: Vec<Vec<f64>> = (0..9).map(|_| vec![rng.random::<f64>(), rng.random::<f64>()]).collect();
        assert!(on_tape(&a, &b).unwrap().abs() < 1e-15);
    }

    #[test]
    fn tape_and_plain_agree_and_are_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let draw = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
            (0..12).map(|_| (0..3).map(|_| StandardNormal.sample(rng)).collect()).collect()
        };
        let a = draw(&mut rng);
        let b = draw(&mut rng);
        let x = on_tape(&a, &b).unwrap();
        let y = hsic_values(&a, &b).unwrap();
        assert!((x - y).abs() < 1e-14);
        assert_eq!(hsic_values(&a, &b).unwrap(), hsic_values(&b, &a).unwrap());
    }

    #[test]
    fn feature_map_registry() {
        let reg = feature_maps();
        assert_eq!(reg.names(), vec!["flatten", "pool"]);
        let mut tape = Tape::<f32>::new();
        let f = tape.constant(Tensor::from_fn(&[5, 2, 3, 3], |i| i as f32));
        let flat = reg.get("flatten").unwrap().vectorize_f32(&mut tape, f).unwrap();
        assert_eq!(tape.shape(flat), &[5, 18]);
        let pooled = reg.get("pool").unwrap().vectorize_f32(&mut tape, f).unwrap();
        assert_eq!(tape.shape(pooled), &[5, 2]);
    }
}
