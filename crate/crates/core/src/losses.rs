//! Every objective term: allocated component classification, content–style
//! adversarial entropy terms, style–content and inter-expert independence,
//! hinge GAN, feature matching and reconstruction, plus the per-step
//! [`LossReport`].
//!
//! All functions build onto a caller-owned tape. Expectations are means over
//! the mini-batch.

use serde::{Deserialize, Serialize};

use crate::allocation::{AllocationResult, AllocationSolver, PredictionMatrix};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::hsic::{hsic_from_grams, FeatureMap, MapFloat};
use crate::network::{one_hot, DiscOutput};
use crate::tensor::{Float, Tensor};

/// Mean cross-entropy of `[B, C]` logits against integer labels.
pub fn cross_entropy<T: Float>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let s = tape.shape(logits).to_vec();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::shape("cross_entropy", &s, &[labels.len()]));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= s[1]) {
        return Err(Error::contract(format!("label {bad} out of range for {} classes", s[1])));
    }
    let target = tape.constant(one_hot(labels, s[1]));
    weighted_nll(tape, logits, target, s[0])
}

/// `−Σ target ⊙ log_softmax(logits) / batch`.
fn weighted_nll<T: Float>(tape: &mut Tape<T>, logits: Var, target: Var, batch: usize) -> Result<Var> {
    let logp = tape.log_softmax(logits)?;
    let picked = tape.mul(logp, target)?;
    let total = tape.sum(picked)?;
    tape.scale(total, T::of(-1.0 / batch as f64))
}

/// Mean Shannon entropy (nats) of the softmax of `[B, C]` logits.
pub fn mean_entropy<T: Float>(tape: &mut Tape<T>, logits: Var) -> Result<Var> {
    let s = tape.shape(logits).to_vec();
    if s.len() != 2 {
        return Err(Error::shape("entropy", &s, &[0, 0]));
    }
    let p = tape.softmax(logits)?;
    let logp = tape.log_softmax(logits)?;
    let plogp = tape.mul(p, logp)?;
    let total = tape.sum(plogp)?;
    tape.scale(total, T::of(-1.0 / s[0] as f64))
}

/// Per-sample prediction matrices `P[i][j] = softmax(logits_i)[b, U_c[j]]`.
pub fn prediction_matrices<T: Float>(
    tape: &Tape<T>,
    component_logits: &[Var],
    components: &[&[usize]],
) -> Result<Vec<PredictionMatrix>> {
    let k = component_logits.len();
    let probs: Vec<Vec<f64>> = component_logits
        .iter()
        .map(|&l| {
            let v = tape.value(l);
            let c = v.shape()[1];
            v.data()
                .chunks(c)
                .flat_map(|row| {
                    let mx = row.iter().fold(f64::NEG_INFINITY, |a, &x| a.max(x.as_f64()));
                    let e: Vec<f64> = row.iter().map(|&x| (x.as_f64() - mx).exp()).collect();
                    let z: f64 = e.iter().sum();
                    e.into_iter().map(move |x| x / z)
                })
                .collect()
        })
        .collect();
    let v = tape.shape(component_logits[0])[1];
    components
        .iter()
        .enumerate()
        .map(|(b, u)| {
            if u.is_empty() {
                return Err(Error::contract("component set U_c is empty"));
            }
            let mut p = Vec::with_capacity(k * u.len());
            for pi in &probs {
                p.extend(u.iter().map(|&j| pi[b * v + j]));
            }
            PredictionMatrix::new(k, u.len(), p)
        })
        .collect()
}

/// Solves the allocation of every sample's components to experts.
pub fn allocate<T: Float>(
    tape: &Tape<T>,
    component_logits: &[Var],
    components: &[&[usize]],
    solver: &dyn AllocationSolver,
) -> Result<Vec<AllocationResult>> {
    prediction_matrices(tape, component_logits, components)?
        .iter()
        .map(|p| solver.solve(p))
        .collect()
}

/// Allocated component classification loss per expert:
/// `L_cls,c,i = mean_b Σ_{j ∈ U_c} w_ij · CE(logits_i[b], u_j)`.
/// The allocations enter as constants.
pub fn component_cls_loss<T: Float>(
    tape: &mut Tape<T>,
    component_logits: &[Var],
    components: &[&[usize]],
    allocations: &[AllocationResult],
) -> Result<Vec<Var>> {
    let b = components.len();
    if allocations.len() != b {
        return Err(Error::contract("one allocation per sample is required"));
    }
    component_logits
        .iter()
        .enumerate()
        .map(|(i, &logits)| {
            let v = tape.shape(logits)[1];
            if tape.shape(logits)[0] != b {
                return Err(Error::shape("component_cls_loss", tape.shape(logits), &[b, v]));
            }
            let mut weights = Tensor::<T>::zeros(&[b, v]);
            for (s, (u, w)) in components.iter().zip(allocations).enumerate() {
                if u.is_empty() {
                    return Err(Error::contract("component set U_c is empty"));
                }
                for (j, &comp) in u.iter().enumerate() {
                    if w.get(i, j) {
                        weights.data_mut()[s * v + comp] += T::one();
                    }
                }
            }
            let weights = tape.constant(weights);
            weighted_nll(tape, logits, weights, b)
        })
        .collect()
}

/// HSIC₁ between every expert's style and content features.
pub fn style_content_independence<T: MapFloat>(
    tape: &mut Tape<T>,
    style: &[Var],
    content: &[Var],
    map: &dyn FeatureMap,
) -> Result<Vec<Var>> {
    style
        .iter()
        .zip(content)
        .map(|(&s, &c)| {
            let (vs, vc) = (T::vectorize(map, tape, s)?, T::vectorize(map, tape, c)?);
            let (ks, kc) = (tape.rbf_gram(vs)?, tape.rbf_gram(vc)?);
            hsic_from_grams(tape, ks, kc)
        })
        .collect()
}

/// Inter-expert independence: `Σ_{i' ≠ i} HSIC₁(f_i, f_{i'})` per
/// expert. Each unordered pair is evaluated once and shared by both
/// experts, which is exact because the estimator is symmetric.
pub fn inter_expert_independence<T: MapFloat>(
    tape: &mut Tape<T>,
    features: &[Var],
    map: &dyn FeatureMap,
) -> Result<(Vec<Var>, Vec<Var>)> {
    let k = features.len();
    let mut grams = Vec::with_capacity(k);
    for &f in features {
        let v = T::vectorize(map, tape, f)?;
        grams.push(tape.rbf_gram(v)?);
    }
    let mut per_expert: Vec<Option<Var>> = vec![None; k];
    let mut pairs = Vec::with_capacity(k * (k.saturating_sub(1)) / 2);
    for i in 0..k {
        for j in (i + 1)..k {
            let h = hsic_from_grams(tape, grams[i], grams[j])?;
            pairs.push(h);
            for e in [i, j] {
                per_expert[e] = Some(match per_expert[e] {
                    Some(acc) => tape.add(acc, h)?,
                    None => h,
                });
            }
        }
    }
    let per_expert = per_expert
        .into_iter()
        .map(|v| v.map_or_else(|| Ok(tape.constant(Tensor::scalar(T::zero()))), Ok))
        .collect::<Result<Vec<Var>>>()?;
    Ok((per_expert, pairs))
}

/// Mean of the `[B, 1]` scores after `[c ± D]₊`.
fn hinge_mean<T: Float>(tape: &mut Tape<T>, score: Var, sign: f64) -> Result<Var> {
    let x = tape.scale(score, T::of(sign))?;
    let x = tape.add_scalar(x, T::one())?;
    let x = tape.hinge(x)?;
    tape.mean(x)
}

/// Standard hinge discriminator loss over both projection heads:
/// `E[1 − D(x)]₊ + E[1 + D(x̃)]₊`, summed over the style and content scores.
pub fn discriminator_hinge<T: Float>(tape: &mut Tape<T>, real: &DiscOutput, fake: &DiscOutput) -> Result<Var> {
    let a = hinge_mean(tape, real.style_score, -1.0)?;
    let b = hinge_mean(tape, real.content_score, -1.0)?;
    let c = hinge_mean(tape, fake.style_score, 1.0)?;
    let d = hinge_mean(tape, fake.content_score, 1.0)?;
    let ab = tape.add(a, b)?;
    let cd = tape.add(c, d)?;
    tape.add(ab, cd)
}

/// `−E[D(x̃, y_s) + D(x̃, y_c)]`.
pub fn generator_adversarial<T: Float>(tape: &mut Tape<T>, fake: &DiscOutput) -> Result<Var> {
    let s = tape.mean(fake.style_score)?;
    let c = tape.mean(fake.content_score)?;
    let total = tape.add(s, c)?;
    tape.neg(total)
}

/// Mean absolute difference of two same-shaped tensors.
pub fn mean_abs_diff<T: Float>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let n = tape.value(a).numel();
    let d = tape.sub(a, b)?;
    let l = tape.l1(d)?;
    tape.scale(l, T::of(1.0 / n as f64))
}

/// `Σ_l E‖D^l(x) − D^l(x̃)‖₁` with per-element means inside each layer.
pub fn feature_matching<T: Float>(tape: &mut Tape<T>, real: &[Var], fake: &[Var]) -> Result<Var> {
    if real.len() != fake.len() || real.is_empty() {
        return Err(Error::contract("feature matching needs matching non-empty layer lists"));
    }
    let mut total = None;
    for (&r, &f) in real.iter().zip(fake) {
        let term = mean_abs_diff(tape, r, f)?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("non-empty"))
}

/// Which terms of the objective are active (the `ablation-*` profiles toggle the
/// last four).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossToggles {
    pub adversarial: bool,
    pub feature_matching: bool,
    pub reconstruction: bool,
    /// Style CE on style features and allocated component CE on content
    /// features (`L_{c,s}` without the entropy terms).
    pub classification: bool,
    /// Entropy-maximisation terms `H_{c,s}`.
    pub entropy: bool,
    /// Style–content HSIC.
    pub style_content_indp: bool,
    /// Inter-expert HSIC.
    pub inter_expert_indp: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        LossToggles {
            adversarial: true,
            feature_matching: true,
            reconstruction: true,
            classification: true,
            entropy: true,
            style_content_indp: true,
            inter_expert_indp: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub recon: f64,
    pub fm: f64,
    pub entropy: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            recon: 0.1,
            fm: 1.0,
            entropy: 1.0,
        }
    }
}

/// Every scalar of one training step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub l_adv_d: f64,
    pub l_adv_g: f64,
    pub l_recon: f64,
    pub l_fm: f64,
    /// Per expert: `CE(Cls_s(f_s), y_s) − H(Cls_u(f_s))`.
    pub l_s: Vec<f64>,
    /// Per expert: `L_cls,c − H(Cls_s(f_c))`.
    pub l_c: Vec<f64>,
    pub l_indp: Vec<f64>,
    pub l_indp_exp: Vec<f64>,
    /// Diagnostics: the CE and entropy parts of `l_s`, `l_c`.
    pub ce_style: Vec<f64>,
    pub ce_component: Vec<f64>,
    pub entropy_style_feat: Vec<f64>,
    pub entropy_content_feat: Vec<f64>,
    pub lambda_recon: f64,
    pub loss_d: f64,
    pub loss_g: f64,
    pub loss_exp: f64,
}

impl LossReport {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serialises")
    }

    /// `Σ_i (l_s_i + l_c_i + l_indp_i + l_indp_exp_i)`.
    pub fn expert_sum(&self) -> f64 {
        (0..self.l_s.len())
            .map(|i| self.l_s[i] + self.l_c[i] + self.l_indp[i] + self.l_indp_exp[i])
            .sum()
    }
}
