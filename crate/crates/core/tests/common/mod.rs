//! Shared fixtures for the integration tests.

#![allow(dead_code)]

use lexpert_core::allocation::FlowSolver;
use lexpert_core::gradcheck::{self, GradCheckReport};
use lexpert_core::hsic::Flatten;
use lexpert_core::losses::{
    allocate, component_cls_loss, cross_entropy, discriminator_hinge, feature_matching, generator_adversarial,
    inter_expert_independence, mean_abs_diff, mean_entropy, style_content_independence,
};
use lexpert_core::network::{ExpertFeatures, Model, ModelConfig, Net};
use lexpert_core::{Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A model small enough for finite differences: 8×8 glyphs, two experts.
pub fn gradcheck_model() -> Model<f64> {
    let cfg = ModelConfig {
        k: 2,
        d: 3,
        image_size: 8,
        stem_channels: [3, 3],
        head_blocks: 1,
        classifier_blocks: 1,
        gen_channels: [4, 3, 3],
        disc_channels: vec![3, 4],
        disc_spectral_norm: true,
        num_styles: 3,
        num_chars: 4,
        num_components: 5,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut model = Model::new(cfg, &mut rng).unwrap();
    // zero-initialised biases put ReLU inputs exactly on the kink wherever a
    // receptive field is all zeros; move them off it
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        if model.params.name(id).ends_with(".b") {
            for v in model.params.get_mut(id).data_mut() {
                *v = rng.random_range(-0.1..0.1);
            }
        }
    }
    model
}

/// Fixed inputs of one miniature step: `t = 2` targets with `n = 2` style
/// and content references each (B = 8 reference images).
pub struct Fixture {
    pub model: Model<f64>,
    pub refs: Tensor<f64>,
    pub real: Tensor<f64>,
    pub fake: Tensor<f64>,
    pub ref_styles: Vec<usize>,
    pub ref_components: Vec<Vec<usize>>,
    pub target_styles: Vec<usize>,
    pub target_chars: Vec<usize>,
}

pub fn fixture() -> Fixture {
    let model = gradcheck_model();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut img = |b: usize| Tensor::from_fn(&[b, 1, 8, 8], |_| rng.random_range(0.0..1.0));
    let (refs, real, fake) = (img(8), img(2), img(2));
    Fixture {
        model,
        refs,
        real,
        fake,
        ref_styles: vec![0, 0, 1, 1, 2, 0, 1, 2],
        ref_components: vec![
            vec![0, 1],
            vec![2],
            vec![1, 3, 4],
            vec![0, 4],
            vec![2, 3],
            vec![0, 1, 2],
            vec![4],
            vec![1, 2, 3, 4],
        ],
        target_styles: vec![0, 1],
        target_chars: vec![2, 3],
    }
}

/// Binds the parameters whose names satisfy `select` to the gradcheck
/// variables (in order) and everything else to constants.
fn net_with(model: &Model<f64>, tape: &mut Tape<f64>, vars: &[Var], select: fn(&str) -> bool) -> Result<Net> {
    let mut it = vars.iter();
    let all = model
        .params
        .entries()
        .map(|(name, t)| {
            if select(name) {
                *it.next().expect("one variable per selected parameter")
            } else {
                tape.constant(t.clone())
            }
        })
        .collect();
    model.net_from_vars(all)
}

fn selected(model: &Model<f64>, select: fn(&str) -> bool) -> Vec<Tensor<f64>> {
    model.params.entries().filter(|(n, _)| select(n)).map(|(_, t)| t.clone()).collect()
}

fn d_group(n: &str) -> bool {
    n.starts_with("disc.")
}
fn g_group(n: &str) -> bool {
    n.starts_with("enc.") || n.starts_with("proj.") || n.starts_with("gen.")
}
fn exp_group(n: &str) -> bool {
    n.starts_with("enc.") || n.starts_with("proj.") || n.starts_with("cls.")
}
fn encoder_group(n: &str) -> bool {
    n.starts_with("enc.") || n.starts_with("proj.")
}

/// Style means over refs 0..4 (two per target) and content means over refs 4..8.
fn fake_from_refs(tape: &mut Tape<f64>, net: &Net, feats: &ExpertFeatures) -> Result<Var> {
    let mean = |tape: &mut Tape<f64>, x: Var, start: usize| -> Result<Var> {
        let rows: Vec<Var> = (0..2)
            .map(|t| {
                let a = tape.slice(x, 0, start + 2 * t, 1)?;
                let b = tape.slice(x, 0, start + 2 * t + 1, 1)?;
                let s = tape.add(a, b)?;
                tape.scale(s, 0.5)
            })
            .collect::<Result<_>>()?;
        tape.concat(&rows, 0)
    };
    let style = feats.style.iter().map(|&s| mean(tape, s, 0)).collect::<Result<Vec<_>>>()?;
    let content = feats.content.iter().map(|&c| mean(tape, c, 4)).collect::<Result<Vec<_>>>()?;
    net.generate(tape, &style, &content)
}

pub type TermFn = Box<dyn Fn(&Fixture, &mut Tape<f64>, &[Var]) -> Result<Var>>;

/// Every loss term with the parameter group it is differentiated against.
pub fn loss_terms() -> Vec<(&'static str, fn(&str) -> bool, TermFn)> {
    let mut terms: Vec<(&'static str, fn(&str) -> bool, TermFn)> = Vec::new();
    terms.push((
        "l_adv_d (hinge)",
        d_group,
        Box::new(|fx, tape, vars| {
            let net = net_with(&fx.model, tape, vars, d_group)?;
            let (real, fake) = (tape.constant(fx.real.clone()), tape.constant(fx.fake.clone()));
            let dr = net.discriminate(tape, real, &fx.target_styles, &fx.target_chars)?;
            let df = net.discriminate(tape, fake, &fx.target_styles, &fx.target_chars)?;
            discriminator_hinge(tape, &dr, &df)
        }),
    ));
    for name in ["l_adv_g", "l_fm", "l_recon"] {
        terms.push((
            name,
            g_group,
            Box::new(move |fx, tape, vars| {
                let net = net_with(&fx.model, tape, vars, g_group)?;
                let x = tape.constant(fx.refs.clone());
                let feats = net.encode(tape, x)?;
                let fake = fake_from_refs(tape, &net, &feats)?;
                let real = tape.constant(fx.real.clone());
                match name {
                    "l_recon" => mean_abs_diff(tape, fake, real),
                    _ => {
                        let df = net.discriminate(tape, fake, &fx.target_styles, &fx.target_chars)?;
                        if name == "l_adv_g" {
                            generator_adversarial(tape, &df)
                        } else {
                            let dr = net.discriminate(tape, real, &fx.target_styles, &fx.target_chars)?;
                            feature_matching(tape, &dr.layers, &df.layers)
                        }
                    }
                }
            }),
        ));
    }
    terms.push((
        "ce_style",
        exp_group,
        Box::new(|fx, tape, vars| {
            let net = net_with(&fx.model, tape, vars, exp_group)?;
            let x = tape.constant(fx.refs.clone());
            let feats = net.encode(tape, x)?;
            let mut total = None;
            for &s in &feats.style {
                let (logits, _) = net.classify(tape, s)?;
                let ce = cross_entropy(tape, logits, &fx.ref_styles)?;
                total = Some(match total {
                    Some(t) => tape.add(t, ce)?,
                    None => ce,
                });
            }
            Ok(total.unwrap())
        }),
    ));
    terms.push((
        "l_cls_c (allocated)",
        exp_group,
        Box::new(|fx, tape, vars| {
            let comps: Vec<&[usize]> = fx.ref_components.iter().map(|c| c.as_slice()).collect();
            // the allocation is a constant: solve it once at the unperturbed point
            let alloc = {
                let mut t0 = Tape::new();
                let net = fx.model.bind(&mut t0, |_| false);
                let x = t0.constant(fx.refs.clone());
                let feats = net.encode(&mut t0, x)?;
                let logits = feats
                    .content
                    .iter()
                    .map(|&c| Ok(net.classify(&mut t0, c)?.1))
                    .collect::<Result<Vec<_>>>()?;
                allocate(&t0, &logits, &comps, &FlowSolver)?
            };
            let net = net_with(&fx.model, tape, vars, exp_group)?;
            let x = tape.constant(fx.refs.clone());
            let feats = net.encode(tape, x)?;
            let logits = feats
                .content
                .iter()
                .map(|&c| Ok(net.classify(tape, c)?.1))
                .collect::<Result<Vec<_>>>()?;
            let per = component_cls_loss(tape, &logits, &comps, &alloc)?;
            let s = tape.add(per[0], per[1])?;
            Ok(s)
        }),
    ));
    for (name, of_style) in [("entropy H(Cls_u(f_s))", true), ("entropy H(Cls_s(f_c))", false)] {
        terms.push((
            name,
            encoder_group,
            Box::new(move |fx, tape, vars| {
                let net = net_with(&fx.model, tape, vars, encoder_group)?;
                let x = tape.constant(fx.refs.clone());
                let feats = net.encode(tape, x)?;
                let mut total = None;
                for i in 0..2 {
                    let (s, c) = net.classify(tape, if of_style { feats.style[i] } else { feats.content[i] })?;
                    let h = mean_entropy(tape, if of_style { c } else { s })?;
                    total = Some(match total {
                        Some(t) => tape.add(t, h)?,
                        None => h,
                    });
                }
                Ok(total.unwrap())
            }),
        ));
    }
    terms.push((
        "l_indp (style-content HSIC)",
        encoder_group,
        Box::new(|fx, tape, vars| {
            let net = net_with(&fx.model, tape, vars, encoder_group)?;
            let x = tape.constant(fx.refs.clone());
            let feats = net.encode(tape, x)?;
            let per = style_content_independence(tape, &feats.style, &feats.content, &Flatten)?;
            tape.add(per[0], per[1])
        }),
    ));
    terms.push((
        "l_indp_exp (inter-expert HSIC)",
        encoder_group,
        Box::new(|fx, tape, vars| {
            let net = net_with(&fx.model, tape, vars, encoder_group)?;
            let x = tape.constant(fx.refs.clone());
            let feats = net.encode(tape, x)?;
            let (per, _) = inter_expert_independence(tape, &feats.f, &Flatten)?;
            tape.add(per[0], per[1])
        }),
    ));
    terms
}

/// Central-difference checks of every loss term on `coords` coordinates.
pub fn check_loss_terms(coords: usize) -> Vec<(&'static str, GradCheckReport)> {
    let fx = fixture();
    loss_terms()
        .into_iter()
        .enumerate()
        .map(|(i, (name, group, f))| {
            let inputs = selected(&fx.model, group);
            let mut rng = ChaCha8Rng::seed_from_u64(100 + i as u64);
            let report = gradcheck::check(&inputs, |tape, vars| f(&fx, tape, vars), coords, 1e-5, &mut rng).unwrap();
            (name, report)
        })
        .collect()
}

