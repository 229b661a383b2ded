//! Alternating optimisation of the three objectives: discriminator, then
//! generator (encoder, projections, generator), then experts (encoder,
//! projections, classifiers). Each sub-step has its own backward pass and
//! its own Adam state.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::allocation::{solvers, AllocationSolver};
use crate::autodiff::{Gradients, Tape, Var};
use crate::corpus::{sample_batch, Corpus, MiniBatch};
use crate::error::{Error, Result};
use crate::fewshot::generate_grouped;
use crate::hsic::{feature_maps, FeatureMap};
use crate::losses::{
    allocate, component_cls_loss, cross_entropy, discriminator_hinge, feature_matching, generator_adversarial,
    inter_expert_independence, mean_abs_diff, mean_entropy, style_content_independence, LossReport, LossToggles,
    LossWeights,
};
use crate::network::{Model, ModelConfig, Net, CLASSIFIERS, DISCRIMINATOR, ENCODER, GENERATOR, PROJECTIONS};
use crate::optim::{Adam, AdamConfig};
use crate::params::{read_checkpoint, write_checkpoint, Binding, ParamStore};
use crate::registry::Registry;
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "lexpert-train";

/// Everything that determines a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub total_iterations: u64,
    /// References per target for each of style and content.
    pub n: usize,
    pub targets_per_step: usize,
    pub lr_discriminator: f64,
    pub lr_rest: f64,
    pub adam_betas: [f64; 2],
    pub adam_eps: f64,
    /// Allocation solver name (`flow`, `brute-force`).
    pub solver: String,
    /// Vectorisation of `[B, d, w, h]` features before HSIC (`flatten`, `pool`).
    pub feature_map: String,
    /// Write a checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: u64,
    /// Evaluate the held-out reconstruction probe every this many steps (0 = never).
    pub probe_every: u64,
    pub probe_targets: usize,
    pub toggles: LossToggles,
    pub weights: LossWeights,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 1,
            total_iterations: 20_000,
            n: 3,
            targets_per_step: 8,
            lr_discriminator: 1e-3,
            lr_rest: 2e-4,
            adam_betas: [0.0, 0.9],
            adam_eps: 1e-8,
            solver: "flow".into(),
            feature_map: "flatten".into(),
            checkpoint_every: 5_000,
            probe_every: 100,
            probe_targets: 32,
            toggles: LossToggles::default(),
            weights: LossWeights::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_discriminator > 0.0 && self.lr_rest > 0.0) {
            return Err(Error::config("learning rates must be positive"));
        }
        let [b1, b2] = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) || self.adam_eps <= 0.0 {
            return Err(Error::config("Adam betas must lie in [0, 1) and eps must be positive"));
        }
        if self.n == 0 || self.targets_per_step == 0 {
            return Err(Error::config("n and targets_per_step must be positive"));
        }
        let w = &self.weights;
        if [w.recon, w.fm, w.entropy].iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::config("loss weights must be finite and non-negative"));
        }
        solvers().get(&self.solver)?;
        feature_maps().get(&self.feature_map)?;
        // label spaces are filled from the corpus, so only check the rest here
        ModelConfig {
            num_styles: 1,
            num_chars: 1,
            num_components: 1,
            ..self.model.clone()
        }
        .validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }
}

/// A named way to derive a configuration from the defaults.
pub trait Profile: Send + Sync {
    fn describe(&self) -> &'static str;
    fn apply(&self, cfg: &mut TrainConfig);
}

struct FnProfile(&'static str, fn(&mut TrainConfig));

impl Profile for FnProfile {
    fn describe(&self) -> &'static str {
        self.0
    }
    fn apply(&self, cfg: &mut TrainConfig) {
        (self.1)(cfg)
    }
}

fn korean(cfg: &mut TrainConfig) {
    cfg.model.k = 3;
    cfg.toggles.inter_expert_indp = false;
}

/// Named configuration profiles. `ablation-*` follow the four rows of the
/// loss ablation on top of the three-expert profile.
pub fn profiles() -> Registry<dyn Profile> {
    let mut r: Registry<dyn Profile> = Registry::new("profile");
    r.register("desk", Arc::new(FnProfile("toy-scale defaults: k=6, 20k steps", |_| {})));
    r.register(
        "full",
        Arc::new(FnProfile("full-scale schedule: 650k steps, d=64 features", |c| {
            c.total_iterations = 650_000;
            c.model.d = 64;
            c.checkpoint_every = 50_000;
            c.probe_every = 1_000;
        })),
    );
    r.register(
        "korean",
        Arc::new(FnProfile("three experts without inter-expert independence", korean)),
    );
    r.register(
        "smoke",
        Arc::new(FnProfile("a few steps for pipeline checks", |c| {
            c.total_iterations = 4;
            c.checkpoint_every = 2;
            c.probe_every = 2;
            c.probe_targets = 8;
        })),
    );
    r.register("ablation-full", Arc::new(FnProfile("three experts, every term", korean)));
    r.register(
        "ablation-no-indp",
        Arc::new(FnProfile("three experts without style-content independence", |c| {
            korean(c);
            c.toggles.style_content_indp = false;
        })),
    );
    r.register(
        "ablation-no-indp-no-entropy",
        Arc::new(FnProfile("additionally without the entropy terms", |c| {
            korean(c);
            c.toggles.style_content_indp = false;
            c.toggles.entropy = false;
        })),
    );
    r.register(
        "ablation-none",
        Arc::new(FnProfile("additionally without classification losses", |c| {
            korean(c);
            c.toggles.style_content_indp = false;
            c.toggles.entropy = false;
            c.toggles.classification = false;
        })),
    );
    r
}

pub fn profile_config(name: &str) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    profiles().get(name)?.apply(&mut cfg);
    Ok(cfg)
}

/// Parameter groups of the three sub-steps.
pub fn in_discriminator_group(name: &str) -> bool {
    name.starts_with(DISCRIMINATOR)
}

pub fn in_generator_group(name: &str) -> bool {
    name.starts_with(ENCODER) || name.starts_with(PROJECTIONS) || name.starts_with(GENERATOR)
}

pub fn in_expert_group(name: &str) -> bool {
    name.starts_with(ENCODER) || name.starts_with(PROJECTIONS) || name.starts_with(CLASSIFIERS)
}

fn group_ids(store: &ParamStore<f32>, member: fn(&str) -> bool) -> Vec<crate::params::ParamId> {
    store.ids().filter(|&id| member(store.name(id))).collect()
}

/// Gradients of each sub-step, keyed by parameter; exposed for the
/// stop-gradient and partition checks.
#[derive(Default)]
pub struct StepGradients {
    pub discriminator: HashMap<String, Tensor<f32>>,
    pub generator: HashMap<String, Tensor<f32>>,
    pub experts: HashMap<String, Tensor<f32>>,
}

fn collect(store: &ParamStore<f32>, binding: &Binding, grads: Option<&Gradients<f32>>) -> HashMap<String, Tensor<f32>> {
    let mut out = HashMap::new();
    if let Some(g) = grads {
        for id in store.ids() {
            if let Some(t) = g.get(binding.var(id)) {
                out.insert(store.name(id).to_string(), t.clone());
            }
        }
    }
    out
}

/// Names a failing term when its value is not finite.
fn finite(tape: &Tape<f32>, v: Var, term: &str) -> Result<f64> {
    let x = tape.value(v).item() as f64;
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::NonFinite(format!("loss term {term}")))
    }
}

/// Attaches a term name to errors raised while building it.
fn term<T>(r: Result<T>, name: &str) -> Result<T> {
    r.map_err(|e| match e {
        Error::NonFinite(what) => Error::NonFinite(format!("{what} while computing {name}")),
        other => other,
    })
}

fn add_opt(tape: &mut Tape<f32>, acc: Option<Var>, x: Var) -> Result<Option<Var>> {
    Ok(Some(match acc {
        Some(a) => tape.add(a, x)?,
        None => x,
    }))
}

/// `[t, t·n·2]` matrix averaging the `n` rows of group `g` that start at
/// `offset + g·n`.
fn averaging_matrix(t: usize, n: usize, offset: usize, cols: usize) -> Tensor<f32> {
    let mut m = Tensor::zeros(&[t, cols]);
    for g in 0..t {
        for r in 0..n {
            m.data_mut()[g * cols + offset + g * n + r] = 1.0 / n as f32;
        }
    }
    m
}

/// A fixed set of held-out reconstructions: unseen styles × unseen
/// characters, with references drawn from the training characters (style)
/// and training styles (content).
#[derive(Clone, Debug)]
pub struct ReconProbe {
    images: Tensor<f32>,
    style_groups: Vec<Vec<usize>>,
    content_groups: Vec<Vec<usize>>,
    truth: Tensor<f32>,
}

impl ReconProbe {
    pub fn new(corpus: &Corpus, n: usize, count: usize, seed: u64) -> Result<Self> {
        use rand::seq::{index, IndexedRandom};
        let splits = corpus.splits();
        let (hs, hc) = (&splits.heldout_styles, &splits.heldout_chars);
        let (ts, tc) = (&splits.train_styles, &splits.train_chars);
        if hs.is_empty() || hc.is_empty() || ts.len() < n || tc.len() < n || count == 0 {
            return Err(Error::contract("the corpus has no held-out pairs to probe"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut samples = Vec::new();
        let (mut style_groups, mut content_groups, mut targets) = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..count {
            let s = *hs.choose(&mut rng).unwrap();
            let c = *hc.choose(&mut rng).unwrap();
            targets.push(corpus.sample_index(s, c));
            let mut sg = Vec::with_capacity(n);
            for k in index::sample(&mut rng, tc.len(), n) {
                sg.push(samples.len());
                samples.push(corpus.sample_index(s, tc[k]));
            }
            let mut cg = Vec::with_capacity(n);
            for k in index::sample(&mut rng, ts.len(), n) {
                cg.push(samples.len());
                samples.push(corpus.sample_index(ts[k], c));
            }
            style_groups.push(sg);
            content_groups.push(cg);
        }
        Ok(ReconProbe {
            images: corpus.images(&samples),
            style_groups,
            content_groups,
            truth: corpus.images(&targets),
        })
    }

    /// Mean absolute pixel error of the reconstructions.
    pub fn evaluate(&self, model: &Model<f32>) -> Result<f64> {
        let fake = generate_grouped(model, &self.images, &self.style_groups, &self.content_groups)?;
        let total: f64 = fake
            .data()
            .iter()
            .zip(self.truth.data())
            .map(|(&a, &b)| (a as f64 - b as f64).abs())
            .sum();
        Ok(total / fake.numel() as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub step: u64,
    pub heldout_recon_l1: f64,
}

/// Model, optimiser states and sampling stream of one run.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub corpus: Arc<Corpus>,
    pub model: Model<f32>,
    opt_d: Adam,
    opt_g: Adam,
    opt_exp: Adam,
    rng: ChaCha8Rng,
    solver: Arc<dyn AllocationSolver>,
    map: Arc<dyn FeatureMap>,
    step: u64,
}

impl Trainer {
    pub fn new(mut cfg: TrainConfig, corpus: Arc<Corpus>) -> Result<Self> {
        cfg.validate()?;
        let splits = corpus.splits();
        cfg.model.num_styles = splits.train_styles.len();
        cfg.model.num_chars = splits.train_chars.len();
        cfg.model.num_components = corpus.num_components();
        if cfg.model.image_size != corpus.image_size() {
            return Err(Error::config(format!(
                "model expects {}px glyphs but the corpus has {}px",
                cfg.model.image_size,
                corpus.image_size()
            )));
        }
        let mut init = ChaCha8Rng::seed_from_u64(cfg.seed);
        init.set_stream(1);
        let model = Model::new(cfg.model.clone(), &mut init)?;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let adam = |lr| AdamConfig {
            lr,
            beta1: cfg.adam_betas[0],
            beta2: cfg.adam_betas[1],
            eps: cfg.adam_eps,
        };
        let p = &model.params;
        Ok(Trainer {
            opt_d: Adam::new(adam(cfg.lr_discriminator), p, group_ids(p, in_discriminator_group)),
            opt_g: Adam::new(adam(cfg.lr_rest), p, group_ids(p, in_generator_group)),
            opt_exp: Adam::new(adam(cfg.lr_rest), p, group_ids(p, in_expert_group)),
            solver: solvers().get(&cfg.solver)?,
            map: feature_maps().get(&cfg.feature_map)?,
            cfg,
            corpus,
            model,
            rng,
            step: 0,
        })
    }

    /// Completed steps.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn sample(&mut self) -> Result<MiniBatch> {
        sample_batch(&self.corpus, self.cfg.n, self.cfg.targets_per_step, &mut self.rng)
    }

    /// Samples a batch and trains on it.
    pub fn step(&mut self) -> Result<LossReport> {
        let batch = self.sample()?;
        self.train_step(&batch).map(|(r, _)| r)
    }

    /// One D → G → experts update on `batch`.
    pub fn train_step(&mut self, batch: &MiniBatch) -> Result<(LossReport, StepGradients)> {
        let cfg = self.cfg.clone();
        let tg = &cfg.toggles;
        let corpus = Arc::clone(&self.corpus);
        let (n, t) = (batch.n, batch.targets.len());
        let b = 2 * n * t;
        let k = cfg.model.k;
        let style_label = |s: usize| corpus.train_style_label(s).expect("training style");
        let char_label = |c: usize| corpus.train_char_label(c).expect("training character");
        let refs = batch.reference_samples();
        let ref_styles: Vec<usize> = refs.iter().map(|&r| style_label(corpus.manifest.samples[r].style_id)).collect();
        let ref_components: Vec<&[usize]> =
            refs.iter().map(|&r| corpus.components_of(corpus.manifest.samples[r].char_id)).collect();
        let ys: Vec<usize> = batch.targets.iter().map(|x| style_label(x.style_id)).collect();
        let yc: Vec<usize> = batch.targets.iter().map(|x| char_label(x.char_id)).collect();
        let x_real = corpus.images(&batch.target_samples());

        let mut report = LossReport {
            step: self.step + 1,
            lambda_recon: cfg.weights.recon,
            ..LossReport::default()
        };
        let mut grads = StepGradients::default();

        // shared forward pass: encode references, average, generate
        let mut tape = Tape::new();
        let net = self.model.bind(&mut tape, |name| !in_discriminator_group(name));
        let x_refs = tape.constant(corpus.images(&refs));
        let feats = term(net.encode(&mut tape, x_refs), "encoder")?;
        let ls = cfg.model.latent_size();
        let flat = cfg.model.d * ls * ls;
        let avg_s = tape.constant(averaging_matrix(t, n, 0, b));
        let avg_c = tape.constant(averaging_matrix(t, n, n * t, b));
        let mut style_mean = Vec::with_capacity(k);
        let mut content_mean = Vec::with_capacity(k);
        for i in 0..k {
            for (src, avg, dst) in [
                (feats.style[i], avg_s, &mut style_mean),
                (feats.content[i], avg_c, &mut content_mean),
            ] {
                let rows = tape.reshape(src, &[b, flat])?;
                let m = tape.matmul(avg, rows)?;
                dst.push(tape.reshape(m, &[t, cfg.model.d, ls, ls])?);
            }
        }
        let fake = term(net.generate(&mut tape, &style_mean, &content_mean), "generator")?;

        // D sub-step on detached fakes
        if tg.adversarial {
            let mut dtape = Tape::new();
            let dnet = self.model.bind(&mut dtape, in_discriminator_group);
            let real = dtape.constant(x_real.clone());
            let fake_d = dtape.constant(tape.value(fake).clone());
            let dr = dnet.discriminate(&mut dtape, real, &ys, &yc)?;
            let df = dnet.discriminate(&mut dtape, fake_d, &ys, &yc)?;
            let ld = term(discriminator_hinge(&mut dtape, &dr, &df), "l_adv_d")?;
            report.l_adv_d = finite(&dtape, ld, "l_adv_d")?;
            report.loss_d = report.l_adv_d;
            let g = dtape.backward(ld)?;
            self.opt_d.step(&mut self.model.params, |id| g.get(dnet.var(id)));
            grads.discriminator = collect(&self.model.params, &dnet.vars, Some(&g));
        } else {
            // zero-gradient objective: Adam still advances its clock
            self.opt_d.step(&mut self.model.params, |_| None);
        }

        // the updated discriminator and the current classifiers as constants
        let frozen = self.model.bind(&mut tape, |_| false);

        // G sub-step
        let mut loss_g: Option<Var> = None;
        if tg.adversarial || tg.feature_matching {
            let df = term(frozen.discriminate(&mut tape, fake, &ys, &yc), "discriminator")?;
            if tg.adversarial {
                let l = term(generator_adversarial(&mut tape, &df), "l_adv_g")?;
                report.l_adv_g = finite(&tape, l, "l_adv_g")?;
                loss_g = add_opt(&mut tape, loss_g, l)?;
            }
            if tg.feature_matching {
                let real = tape.constant(x_real.clone());
                let dr = frozen.discriminate(&mut tape, real, &ys, &yc)?;
                let l = term(feature_matching(&mut tape, &dr.layers, &df.layers), "l_fm")?;
                report.l_fm = finite(&tape, l, "l_fm")?;
                let l = tape.scale(l, cfg.weights.fm as f32)?;
                loss_g = add_opt(&mut tape, loss_g, l)?;
            }
        }
        if tg.reconstruction {
            let real = tape.constant(x_real);
            let l = term(mean_abs_diff(&mut tape, fake, real), "l_recon")?;
            report.l_recon = finite(&tape, l, "l_recon")?;
            let l = tape.scale(l, cfg.weights.recon as f32)?;
            loss_g = add_opt(&mut tape, loss_g, l)?;
        }
        report.loss_g = report.l_adv_g + cfg.weights.fm * report.l_fm + cfg.weights.recon * report.l_recon;

        // expert sub-step terms, on the same tape at pre-update parameters
        let mut loss_exp: Option<Var> = None;
        let zeros = vec![0.0; k];
        (report.l_s, report.l_c, report.l_indp, report.l_indp_exp) =
            (zeros.clone(), zeros.clone(), zeros.clone(), zeros.clone());
        (report.ce_style, report.ce_component, report.entropy_style_feat, report.entropy_content_feat) =
            (zeros.clone(), zeros.clone(), zeros.clone(), zeros);
        if tg.classification || tg.entropy {
            self.classification_terms(&mut tape, &net, &frozen, &feats.style, &feats.content, &ref_styles, &ref_components, &mut report, &mut loss_exp)?;
        }
        if tg.style_content_indp {
            let terms = term(
                style_content_independence(&mut tape, &feats.style, &feats.content, &*self.map),
                "l_indp",
            )?;
            for (i, &v) in terms.iter().enumerate() {
                report.l_indp[i] = finite(&tape, v, &format!("l_indp[{i}]"))?;
                loss_exp = add_opt(&mut tape, loss_exp, v)?;
            }
        }
        if tg.inter_expert_indp && k > 1 {
            let (per, _) = term(inter_expert_independence(&mut tape, &feats.f, &*self.map), "l_indp_exp")?;
            for (i, &v) in per.iter().enumerate() {
                report.l_indp_exp[i] = finite(&tape, v, &format!("l_indp_exp[{i}]"))?;
                loss_exp = add_opt(&mut tape, loss_exp, v)?;
            }
        }
        report.loss_exp = report.expert_sum();

        // backward passes, then the G and expert updates
        let g_grads = loss_g.map(|l| tape.backward(l)).transpose()?;
        let e_grads = loss_exp.map(|l| tape.backward(l)).transpose()?;
        self.opt_g
            .step(&mut self.model.params, |id| g_grads.as_ref().and_then(|g| g.get(net.var(id))));
        self.opt_exp
            .step(&mut self.model.params, |id| e_grads.as_ref().and_then(|g| g.get(net.var(id))));
        grads.generator = collect(&self.model.params, &net.vars, g_grads.as_ref());
        grads.experts = collect(&self.model.params, &net.vars, e_grads.as_ref());
        if !self.model.params.all_finite() {
            return Err(Error::NonFinite(format!("parameters after step {}", report.step)));
        }
        self.step += 1;
        Ok((report, grads))
    }

    /// Style CE and allocated component CE (trainable classifiers) minus the
    /// entropies of the frozen opposite heads.
    #[allow(clippy::too_many_arguments)]
    fn classification_terms(
        &self,
        tape: &mut Tape<f32>,
        net: &Net,
        frozen: &Net,
        style: &[Var],
        content: &[Var],
        ref_styles: &[usize],
        ref_components: &[&[usize]],
        report: &mut LossReport,
        loss: &mut Option<Var>,
    ) -> Result<()> {
        let tg = &self.cfg.toggles;
        let k = style.len();
        let b = ref_styles.len();
        let all_s = tape.concat(style, 0)?;
        let all_c = tape.concat(content, 0)?;
        let split = |tape: &mut Tape<f32>, x: Var| -> Result<Vec<Var>> {
            (0..k).map(|i| tape.slice(x, 0, i * b, b)).collect()
        };
        let mut ce_s = vec![None; k];
        let mut ce_c = vec![None; k];
        if tg.classification {
            let (style_logits, _) = net.classify(tape, all_s)?;
            let (_, comp_logits) = net.classify(tape, all_c)?;
            let style_logits = split(tape, style_logits)?;
            let comp_logits = split(tape, comp_logits)?;
            for i in 0..k {
                ce_s[i] = Some(term(cross_entropy(tape, style_logits[i], ref_styles), "ce_style")?);
            }
            let alloc = allocate(tape, &comp_logits, ref_components, &*self.solver)?;
            let per = term(component_cls_loss(tape, &comp_logits, ref_components, &alloc), "ce_component")?;
            for (i, v) in per.into_iter().enumerate() {
                ce_c[i] = Some(v);
            }
        }
        let mut ent_s = vec![None; k];
        let mut ent_c = vec![None; k];
        if tg.entropy {
            let (_, comp_of_style) = frozen.classify(tape, all_s)?;
            let (style_of_content, _) = frozen.classify(tape, all_c)?;
            let comp_of_style = split(tape, comp_of_style)?;
            let style_of_content = split(tape, style_of_content)?;
            for i in 0..k {
                ent_s[i] = Some(term(mean_entropy(tape, comp_of_style[i]), "entropy_style_feat")?);
                ent_c[i] = Some(term(mean_entropy(tape, style_of_content[i]), "entropy_content_feat")?);
            }
        }
        let w = self.cfg.weights.entropy;
        for i in 0..k {
            for (ce, ent, ce_out, ent_out, l_out, name) in [
                (ce_s[i], ent_s[i], &mut report.ce_style, &mut report.entropy_style_feat, &mut report.l_s, "l_s"),
                (ce_c[i], ent_c[i], &mut report.ce_component, &mut report.entropy_content_feat, &mut report.l_c, "l_c"),
            ] {
                let mut total = None;
                if let Some(ce) = ce {
                    ce_out[i] = finite(tape, ce, &format!("{name}[{i}] cross-entropy"))?;
                    total = add_opt(tape, total, ce)?;
                }
                if let Some(h) = ent {
                    ent_out[i] = finite(tape, h, &format!("{name}[{i}] entropy"))?;
                    let neg = tape.scale(h, -w as f32)?;
                    total = add_opt(tape, total, neg)?;
                }
                l_out[i] = ce_out[i] - w * ent_out[i];
                if let Some(v) = total {
                    *loss = add_opt(tape, *loss, v)?;
                }
            }
        }
        Ok(())
    }

    /// Parameters, optimiser moments, step counters and the sampling stream.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries: Vec<(String, Tensor<f32>)> =
            self.model.params.entries().map(|(n, t)| (n.to_string(), t.clone())).collect();
        for (prefix, opt) in [("adam.d", &self.opt_d), ("adam.g", &self.opt_g), ("adam.exp", &self.opt_exp)] {
            entries.extend(opt.export(prefix, &self.model.params));
        }
        let meta = serde_json::json!({
            "format": CHECKPOINT_FORMAT,
            "step": self.step,
            "adam_steps": [self.opt_d.step_count(), self.opt_g.step_count(), self.opt_exp.step_count()],
            "rng": {
                "seed": self.rng.get_seed().to_vec(),
                "stream": self.rng.get_stream(),
                "word_pos": self.rng.get_word_pos().to_string(),
            },
            "config": self.cfg,
            "corpus_hash": self.corpus.content_hash(),
        });
        write_checkpoint(path, &entries, &meta)
    }

    /// Rebuilds a trainer from a checkpoint written by [`Trainer::save`].
    pub fn restore(path: &Path, corpus: Arc<Corpus>) -> Result<Self> {
        let (entries, meta) = read_checkpoint(path)?;
        let bad = |why: &str| Error::load(path.display().to_string(), why.to_string());
        if meta.get("format").and_then(|v| v.as_str()) != Some(CHECKPOINT_FORMAT) {
            return Err(bad("not a training checkpoint"));
        }
        let cfg: TrainConfig = serde_json::from_value(meta["config"].clone()).map_err(|e| bad(&e.to_string()))?;
        if meta["corpus_hash"].as_str() != Some(corpus.content_hash().as_str()) {
            return Err(bad("checkpoint was trained on a different corpus"));
        }
        let mut tr = Trainer::new(cfg.clone(), corpus)?;
        if tr.cfg.model != cfg.model {
            return Err(bad("checkpoint label spaces do not match the corpus"));
        }
        let lookup: HashMap<&str, &Tensor<f32>> = entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let params: Vec<(String, Tensor<f32>)> = entries
            .iter()
            .filter(|(n, _)| !n.starts_with("adam."))
            .cloned()
            .collect();
        tr.model.params.load_entries(&params)?;
        let steps: Vec<u64> = serde_json::from_value(meta["adam_steps"].clone()).map_err(|e| bad(&e.to_string()))?;
        if steps.len() != 3 {
            return Err(bad("expected three optimiser step counters"));
        }
        let store = &tr.model.params;
        tr.opt_d.import("adam.d", store, &lookup, steps[0])?;
        tr.opt_g.import("adam.g", store, &lookup, steps[1])?;
        tr.opt_exp.import("adam.exp", store, &lookup, steps[2])?;
        let rng = &meta["rng"];
        let seed: Vec<u8> = serde_json::from_value(rng["seed"].clone()).map_err(|e| bad(&e.to_string()))?;
        let seed: [u8; 32] = seed.try_into().map_err(|_| bad("rng seed must be 32 bytes"))?;
        let stream = rng["stream"].as_u64().ok_or_else(|| bad("missing rng stream"))?;
        let word_pos: u128 = rng["word_pos"]
            .as_str()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("missing rng position"))?;
        tr.rng = ChaCha8Rng::from_seed(seed);
        tr.rng.set_stream(stream);
        tr.rng.set_word_pos(word_pos);
        tr.step = meta["step"].as_u64().ok_or_else(|| bad("missing step"))?;
        Ok(tr)
    }
}

/// Loads just the model of a training checkpoint.
pub fn load_model(path: &Path) -> Result<Model<f32>> {
    let (entries, meta) = read_checkpoint(path)?;
    let bad = |why: String| Error::load(path.display().to_string(), why);
    if meta.get("format").and_then(|v| v.as_str()) != Some(CHECKPOINT_FORMAT) {
        return Err(bad("not a training checkpoint".into()));
    }
    let cfg: TrainConfig = serde_json::from_value(meta["config"].clone()).map_err(|e| bad(e.to_string()))?;
    // parameter values are overwritten, so the init stream is irrelevant
    let mut model = Model::new(cfg.model, &mut ChaCha8Rng::seed_from_u64(0))?;
    let params: Vec<(String, Tensor<f32>)> = entries.into_iter().filter(|(n, _)| !n.starts_with("adam.")).collect();
    model.params.load_entries(&params)?;
    Ok(model)
}

/// Trains `cfg` to `cfg.total_iterations` in `dir`. A directory holding
/// the `last.ckpt` of an earlier run with the same configuration and corpus
/// is resumed (and returned as is when already complete); a different run
/// in the directory is an error.
pub fn train_or_resume(cfg: &TrainConfig, corpus: Arc<Corpus>, dir: &Path) -> Result<(Trainer, RunOutcome)> {
    let paths = RunPaths::new(dir);
    let mut trainer = if paths.last_checkpoint().exists() {
        let tr = Trainer::restore(&paths.last_checkpoint(), Arc::clone(&corpus))?;
        let mut want = cfg.clone();
        want.model = tr.cfg.model.clone();
        if tr.cfg != want || Trainer::new(cfg.clone(), corpus)?.cfg.model != tr.cfg.model {
            return Err(Error::config(format!(
                "{} holds a run with a different configuration",
                dir.display()
            )));
        }
        log::info!("resuming {} at step {}", dir.display(), tr.step_count());
        tr
    } else {
        Trainer::new(cfg.clone(), corpus)?
    };
    let until = trainer.cfg.total_iterations;
    let probe = if trainer.cfg.probe_every > 0 {
        Some(ReconProbe::new(
            &trainer.corpus,
            trainer.cfg.n,
            trainer.cfg.probe_targets,
            trainer.cfg.seed,
        )?)
    } else {
        None
    };
    let outcome = if trainer.step_count() >= until {
        RunOutcome::default()
    } else {
        run(&mut trainer, until, &paths, probe.as_ref())?
    };
    Ok((trainer, outcome))
}

/// Probe records written so far in a run directory.
pub fn read_probe_log(dir: &Path) -> Result<Vec<ProbeRecord>> {
    let text = fs::read_to_string(RunPaths::new(dir).probe())?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Where a run writes its artefacts.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        RunPaths { dir: dir.into() }
    }
    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.jsonl")
    }
    pub fn probe(&self) -> PathBuf {
        self.dir.join("probe.jsonl")
    }
    pub fn checkpoint(&self, step: u64) -> PathBuf {
        self.dir.join(format!("step_{step:07}.ckpt"))
    }
    pub fn last_checkpoint(&self) -> PathBuf {
        self.dir.join("last.ckpt")
    }
}

/// Summary of [`run`].
#[derive(Clone, Debug, Default)]
pub struct RunOutcome {
    pub checkpoints: Vec<PathBuf>,
    pub probes: Vec<ProbeRecord>,
    pub last: Option<LossReport>,
}

/// Trains until `until` total steps, appending metrics and probe records to
/// `paths` and writing checkpoints on schedule and at the end.
pub fn run(trainer: &mut Trainer, until: u64, paths: &RunPaths, probe: Option<&ReconProbe>) -> Result<RunOutcome> {
    fs::create_dir_all(&paths.dir)?;
    let append = |p: PathBuf| fs::OpenOptions::new().create(true).append(true).open(p);
    let mut metrics = std::io::BufWriter::new(append(paths.metrics())?);
    let mut probe_log = std::io::BufWriter::new(append(paths.probe())?);
    let mut out = RunOutcome::default();
    let every = trainer.cfg.probe_every;
    let mut record_probe = |tr: &Trainer, out: &mut RunOutcome| -> Result<()> {
        if let Some(p) = probe {
            let rec = ProbeRecord {
                step: tr.step_count(),
                heldout_recon_l1: p.evaluate(&tr.model)?,
            };
            writeln!(probe_log, "{}", serde_json::to_string(&rec)?)?;
            probe_log.flush()?;
            out.probes.push(rec);
        }
        Ok(())
    };
    if trainer.step_count() == 0 {
        record_probe(trainer, &mut out)?;
    }
    while trainer.step_count() < until {
        let report = trainer.step()?;
        writeln!(metrics, "{}", report.to_json_line())?;
        let s = trainer.step_count();
        if every > 0 && s % every == 0 {
            metrics.flush()?;
            record_probe(trainer, &mut out)?;
        }
        let ce = trainer.cfg.checkpoint_every;
        if ce > 0 && s % ce == 0 && s < until {
            let p = paths.checkpoint(s);
            trainer.save(&p)?;
            out.checkpoints.push(p);
        }
        if s % 500 == 0 {
            log::info!("step {s}: L_D {:.4} L_G {:.4} L_exp {:.4}", report.loss_d, report.loss_g, report.loss_exp);
        }
        out.last = Some(report);
    }
    metrics.flush()?;
    let p = paths.last_checkpoint();
    trainer.save(&p)?;
    out.checkpoints.push(p);
    Ok(out)
}
