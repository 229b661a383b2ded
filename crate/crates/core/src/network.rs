//! Learnable components: localized experts over a shared stem, per-expert
//! style/content projections, the two feature classifiers, the generator
//! and the multitask projection discriminator.
//!
//! Parameters live in one [`ParamStore`] under dotted names whose first
//! segment is the group: `enc.`, `proj.`, `cls.`, `gen.`, `disc.`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Binding, ParamId, ParamStore};
use crate::tensor::{Float, Tensor};

/// Variance floor of the generator's instance normalisation.
const IN_EPS: f64 = 1e-5;

pub const ENCODER: &str = "enc.";
pub const PROJECTIONS: &str = "proj.";
pub const CLASSIFIERS: &str = "cls.";
pub const GENERATOR: &str = "gen.";
pub const DISCRIMINATOR: &str = "disc.";

const LEAK: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of localized experts.
    pub k: usize,
    /// Channels of every expert feature `f_i`.
    pub d: usize,
    pub image_size: usize,
    /// Widths of the first two stem blocks; the third outputs `d` channels.
    pub stem_channels: [usize; 2],
    pub head_blocks: usize,
    pub classifier_blocks: usize,
    /// Widths of the generator stages at latent, ½ and full resolution.
    pub gen_channels: [usize; 3],
    /// Widths of the discriminator's stride-2 blocks.
    pub disc_channels: Vec<usize>,
    /// Spectrally normalise every discriminator weight (convs, ψ, label
    /// embeddings).
    pub disc_spectral_norm: bool,
    /// Filled from the corpus: training styles, training characters, components.
    pub num_styles: usize,
    pub num_chars: usize,
    pub num_components: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            k: 6,
            d: 16,
            image_size: 32,
            stem_channels: [8, 16],
            head_blocks: 2,
            classifier_blocks: 2,
            gen_channels: [32, 16, 8],
            disc_channels: vec![16, 32, 32, 64],
            disc_spectral_norm: true,
            num_styles: 12,
            num_chars: 110,
            num_components: 10,
        }
    }
}

impl ModelConfig {
    /// Spatial size `w = h` of the expert features.
    pub fn latent_size(&self) -> usize {
        self.image_size / 4
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.d == 0 {
            return Err(Error::config("k and d must be positive"));
        }
        if self.image_size < 8 || self.image_size % 4 != 0 {
            return Err(Error::config(format!(
                "image size must be a multiple of 4 and ≥ 8, got {}",
                self.image_size
            )));
        }
        if self.disc_channels.len() < 2 || self.image_size >> self.disc_channels.len() == 0 {
            return Err(Error::config("discriminator needs 2+ blocks and cannot downsample below 1 pixel"));
        }
        if self.num_styles == 0 || self.num_chars == 0 || self.num_components == 0 {
            return Err(Error::config("label spaces must be non-empty"));
        }
        let widths = self.stem_channels.iter().chain(&self.gen_channels).chain(&self.disc_channels);
        if widths.into_iter().any(|&c| c == 0) {
            return Err(Error::config("layer widths must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: ParamId,
    b: Option<ParamId>,
    stride: usize,
    pad: usize,
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct Layout {
    stem: Vec<Conv>,
    /// `heads[i]` = pairs of convs, one pair per residual block.
    heads: Vec<Vec<(Conv, Conv)>>,
    proj_c: Vec<Conv>,
    proj_s: Vec<Conv>,
    cls_trunk: Vec<(Linear, Linear)>,
    cls_style: Linear,
    cls_comp: Linear,
    gen: Vec<Conv>,
    disc: Vec<Conv>,
    disc_psi: Linear,
    disc_style_emb: ParamId,
    disc_char_emb: ParamId,
}

/// Model configuration plus every parameter.
#[derive(Clone, Debug)]
pub struct Model<T: Float = f32> {
    pub cfg: ModelConfig,
    pub params: ParamStore<T>,
    layout: Layout,
}

/// Per-expert encoder outputs for a batch: `[B, d, w, h]` each.
#[derive(Clone, Debug)]
pub struct ExpertFeatures {
    pub f: Vec<Var>,
    pub style: Vec<Var>,
    pub content: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct DiscOutput {
    /// `[B, 1]` projection scores against the style and character labels.
    pub style_score: Var,
    pub content_score: Var,
    /// Block activations 1..L−1 used by feature matching.
    pub layers: Vec<Var>,
}

struct Builder<'r, T: Float, R: Rng> {
    store: ParamStore<T>,
    rng: &'r mut R,
}

impl<T: Float, R: Rng> Builder<'_, T, R> {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, bias: bool) -> Conv {
        let w = self.store.add_he(format!("{name}.w"), &[cout, cin, k, k], cin * k * k, 1.0, self.rng);
        let b = bias.then(|| self.store.add_zeros(format!("{name}.b"), &[cout]));
        Conv {
            w,
            b,
            stride,
            pad: k / 2,
        }
    }

    fn linear(&mut self, name: &str, fan_in: usize, out: usize) -> Linear {
        Linear {
            w: self.store.add_he(format!("{name}.w"), &[fan_in, out], fan_in, 1.0, self.rng),
            b: self.store.add_zeros(format!("{name}.b"), &[out]),
        }
    }
}

impl<T: Float> Model<T> {
    pub fn new(cfg: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut bld = Builder {
            store: ParamStore::new(),
            rng,
        };
        let [c1, c2] = cfg.stem_channels;
        let d = cfg.d;
        let stem = vec![
            bld.conv("enc.stem.0", 1, c1, 3, 1, true),
            bld.conv("enc.stem.1", c1, c2, 3, 2, true),
            bld.conv("enc.stem.2", c2, d, 3, 2, true),
        ];
        let heads = (0..cfg.k)
            .map(|i| {
                (0..cfg.head_blocks)
                    .map(|b| {
                        (
                            bld.conv(&format!("enc.head.{i}.{b}.0"), d, d, 3, 1, true),
                            bld.conv(&format!("enc.head.{i}.{b}.1"), d, d, 3, 1, true),
                        )
                    })
                    .collect()
            })
            .collect();
        let proj_c = (0..cfg.k).map(|i| bld.conv(&format!("proj.{i}.content"), d, d, 1, 1, false)).collect();
        let proj_s = (0..cfg.k).map(|i| bld.conv(&format!("proj.{i}.style"), d, d, 1, 1, false)).collect();
        let cls_trunk = (0..cfg.classifier_blocks)
            .map(|b| {
                (
                    bld.linear(&format!("cls.trunk.{b}.0"), d, d),
                    bld.linear(&format!("cls.trunk.{b}.1"), d, d),
                )
            })
            .collect();
        let cls_style = bld.linear("cls.style", d, cfg.num_styles);
        let cls_comp = bld.linear("cls.component", d, cfg.num_components);

        let [g0, g1, g2] = cfg.gen_channels;
        let gen = vec![
            bld.conv("gen.0", 2 * d * cfg.k, g0, 1, 1, true),
            bld.conv("gen.1", g0, g0, 3, 1, true),
            bld.conv("gen.2", g0, g1, 3, 1, true),
            bld.conv("gen.3", g1, g2, 3, 1, true),
            bld.conv("gen.out", g2, 1, 3, 1, true),
        ];

        let mut disc = Vec::new();
        let mut cin = 1;
        for (i, &c) in cfg.disc_channels.iter().enumerate() {
            disc.push(bld.conv(&format!("disc.{i}"), cin, c, 3, 2, true));
            cin = c;
        }
        let disc_psi = bld.linear("disc.psi", cin, 1);
        let disc_style_emb = bld.store.add_he("disc.emb.style", &[cfg.num_styles, cin], cin, 1.0, bld.rng);
        let disc_char_emb = bld.store.add_he("disc.emb.char", &[cfg.num_chars, cin], cin, 1.0, bld.rng);

        Ok(Model {
            cfg,
            params: bld.store,
            layout: Layout {
                stem,
                heads,
                proj_c,
                proj_s,
                cls_trunk,
                cls_style,
                cls_comp,
                gen,
                disc,
                disc_psi,
                disc_style_emb,
                disc_char_emb,
            },
        })
    }

    /// Same parameters in another precision.
    pub fn cast<U: Float>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    /// Binds every parameter to `tape`; only names accepted by `trainable`
    /// are gradient-tracked.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: impl Fn(&str) -> bool) -> Net {
        Net {
            cfg: self.cfg.clone(),
            layout: self.layout.clone(),
            vars: self.params.bind(tape, trainable),
        }
    }

    /// A network over caller-provided tape variables, one per parameter in
    /// registration order (used by gradient checks).
    pub fn net_from_vars(&self, vars: Vec<Var>) -> Result<Net> {
        if vars.len() != self.params.len() {
            return Err(Error::contract(format!(
                "expected {} parameter variables, got {}",
                self.params.len(),
                vars.len()
            )));
        }
        Ok(Net {
            cfg: self.cfg.clone(),
            layout: self.layout.clone(),
            vars: Binding::from_vars(vars),
        })
    }

    /// Class activation map of `component` for one `[d, w, h]` feature:
    /// the classifier trunk and component head applied at every location
    /// (row-major `w·h` values). Its spatial mean is not the pooled logit
    /// because the trunk is nonlinear, but each location is scored by the
    /// very same head.
    pub fn component_cam(&self, feature: &[T], component: usize) -> Result<Vec<T>> {
        let d = self.cfg.d;
        let hw = feature.len() / d.max(1);
        if feature.len() != d * hw || hw == 0 || component >= self.cfg.num_components {
            return Err(Error::contract(format!(
                "CAM needs a [{d}, w, h] feature and a component < {}",
                self.cfg.num_components
            )));
        }
        let p = &self.params;
        let dense = |l: &Linear, x: &[T]| -> Vec<T> {
            let (w, b) = (p.get(l.w), p.get(l.b));
            let out = b.numel();
            (0..out)
                .map(|o| b.data()[o] + x.iter().enumerate().map(|(i, &v)| v * w.data()[i * out + o]).sum::<T>())
                .collect()
        };
        let relu = |x: Vec<T>| x.into_iter().map(|v| v.max(T::zero())).collect::<Vec<T>>();
        let head = self.layout.cls_comp;
        let (hw_, hb) = (p.get(head.w), p.get(head.b));
        let v = self.cfg.num_components;
        Ok((0..hw)
            .map(|loc| {
                let mut h: Vec<T> = (0..d).map(|c| feature[c * hw + loc]).collect();
                for (l0, l1) in &self.layout.cls_trunk {
                    let r = dense(l1, &relu(dense(l0, &relu(h.clone()))));
                    h = h.iter().zip(&r).map(|(a, b)| *a + *b).collect();
                }
                let h = relu(h);
                hb.data()[component] + h.iter().enumerate().map(|(i, &x)| x * hw_.data()[i * v + component]).sum::<T>()
            })
            .collect())
    }
}

/// A model's architecture bound to parameter variables on one tape. It
/// holds no reference to the [`Model`], so parameters may be updated while
/// a bound network is still in use.
#[derive(Clone, Debug)]
pub struct Net {
    pub cfg: ModelConfig,
    layout: Layout,
    pub vars: Binding,
}

fn block_act<T: Float>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    tape.leaky_relu(x, T::of(LEAK))
}

impl Net {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars.var(id)
    }

    fn conv<T: Float>(&self, tape: &mut Tape<T>, c: &Conv, x: Var) -> Result<Var> {
        tape.conv2d(x, self.var(c.w), c.b.map(|b| self.var(b)), c.stride, c.pad)
    }

    fn linear<T: Float>(&self, tape: &mut Tape<T>, l: &Linear, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.var(l.w))?;
        tape.bias_add(y, self.var(l.b))
    }

    /// Pre-activation residual block `x + c₁(σ(c₀(σ(x))))`.
    fn residual<T: Float>(&self, tape: &mut Tape<T>, convs: &(Conv, Conv), x: Var) -> Result<Var> {
        let h = tape.relu(x)?;
        let h = self.conv(tape, &convs.0, h)?;
        let h = tape.relu(h)?;
        let h = self.conv(tape, &convs.1, h)?;
        tape.add(x, h)
    }

    /// Encodes `[B, 1, H, W]` glyphs into `k` expert features and their
    /// style/content projections.
    pub fn encode<T: Float>(&self, tape: &mut Tape<T>, x: Var) -> Result<ExpertFeatures> {
        let cfg = &self.cfg;
        let s = tape.shape(x).to_vec();
        let want = [s.first().copied().unwrap_or(0), 1, cfg.image_size, cfg.image_size];
        if s.len() != 4 || s[1..] != want[1..] || s[0] == 0 {
            return Err(Error::shape("encode", &s, &want));
        }
        let lay = &self.layout;
        let mut h = x;
        for c in &lay.stem {
            h = self.conv(tape, c, h)?;
            h = tape.relu(h)?;
        }
        let stem = h;
        let mut out = ExpertFeatures {
            f: Vec::with_capacity(cfg.k),
            style: Vec::with_capacity(cfg.k),
            content: Vec::with_capacity(cfg.k),
        };
        for i in 0..cfg.k {
            let mut f = stem;
            for blk in &lay.heads[i] {
                f = self.residual(tape, blk, f)?;
            }
            out.style.push(self.conv(tape, &lay.proj_s[i], f)?);
            out.content.push(self.conv(tape, &lay.proj_c[i], f)?);
            out.f.push(f);
        }
        Ok(out)
    }

    /// Decodes per-expert style and content features (`[B, d, w, h]` each)
    /// into `[B, 1, H, W]` images in `[0, 1]`. The generator input is the
    /// channel concatenation `f_{s,1}∘f_{c,1}∘…∘f_{s,k}∘f_{c,k}`.
    pub fn generate<T: Float>(&self, tape: &mut Tape<T>, style: &[Var], content: &[Var]) -> Result<Var> {
        let k = self.cfg.k;
        if style.len() != k || content.len() != k {
            return Err(Error::contract(format!(
                "generator expects {k} style and {k} content features, got {} and {}",
                style.len(),
                content.len()
            )));
        }
        let parts: Vec<Var> = style.iter().zip(content).flat_map(|(&s, &c)| [s, c]).collect();
        let x = tape.concat(&parts, 1)?;
        let g = &self.layout.gen;
        // hidden layers are instance-normalised so the output logits cannot
        // drift without bound under L1 on a sigmoid
        let mut h = x;
        for (i, c) in g[..4].iter().enumerate() {
            if i >= 2 {
                h = tape.upsample(h, 2)?;
            }
            h = self.conv(tape, c, h)?;
            h = tape.instance_norm(h, IN_EPS)?;
            h = tape.relu(h)?;
        }
        let h = self.conv(tape, &g[4], h)?;
        tape.sigmoid(h)
    }

    /// Shared residual trunk of the classifiers on pooled `[B, d]` features.
    pub fn classifier_trunk<T: Float>(&self, tape: &mut Tape<T>, pooled: Var) -> Result<Var> {
        let mut h = pooled;
        for (l0, l1) in &self.layout.cls_trunk {
            let r = tape.relu(h)?;
            let r = self.linear(tape, l0, r)?;
            let r = tape.relu(r)?;
            let r = self.linear(tape, l1, r)?;
            h = tape.add(h, r)?;
        }
        tape.relu(h)
    }

    /// `(style logits [B, S], component logits [B, V])` of a `[B, d, w, h]`
    /// feature batch: global average pool, residual trunk, linear heads.
    pub fn classify<T: Float>(&self, tape: &mut Tape<T>, feature: Var) -> Result<(Var, Var)> {
        let s = tape.shape(feature).to_vec();
        let d = self.cfg.d;
        if s.len() != 4 || s[1] != d {
            return Err(Error::shape("classify", &s, &[s.first().copied().unwrap_or(0), d, 0, 0]));
        }
        let pooled = tape.global_avg_pool(feature)?;
        let h = self.classifier_trunk(tape, pooled)?;
        let lay = &self.layout;
        Ok((self.linear(tape, &lay.cls_style, h)?, self.linear(tape, &lay.cls_comp, h)?))
    }

    /// Multitask projection discriminator on `[B, 1, H, W]` images with
    /// dense training-style and training-character labels.
    pub fn discriminate<T: Float>(&self, tape: &mut Tape<T>, x: Var, style: &[usize], chars: &[usize]) -> Result<DiscOutput> {
        let cfg = &self.cfg;
        let b = tape.shape(x)[0];
        if style.len() != b || chars.len() != b {
            return Err(Error::contract(format!(
                "discriminator got {b} images but {} style and {} character labels",
                style.len(),
                chars.len()
            )));
        }
        if let Some(&bad) = style.iter().find(|&&s| s >= cfg.num_styles) {
            return Err(Error::contract(format!("style label {bad} out of range (< {})", cfg.num_styles)));
        }
        if let Some(&bad) = chars.iter().find(|&&c| c >= cfg.num_chars) {
            return Err(Error::contract(format!("character label {bad} out of range (< {})", cfg.num_chars)));
        }
        let lay = &self.layout;
        let mut layers = Vec::with_capacity(lay.disc.len());
        let mut h = x;
        let sn = |tape: &mut Tape<T>, id: ParamId| -> Result<Var> {
            if cfg.disc_spectral_norm {
                tape.spectral_normalize(self.var(id))
            } else {
                Ok(self.var(id))
            }
        };
        for c in &lay.disc {
            let w = sn(tape, c.w)?;
            h = tape.conv2d(h, w, c.b.map(|b| self.var(b)), c.stride, c.pad)?;
            h = block_act(tape, h)?;
            layers.push(h);
        }
        layers.pop();
        let phi = tape.global_avg_pool(h)?;
        let psi_w = sn(tape, lay.disc_psi.w)?;
        let psi = tape.matmul(phi, psi_w)?;
        let psi = tape.bias_add(psi, self.var(lay.disc_psi.b))?;
        let width = *cfg.disc_channels.last().unwrap();
        let ones = tape.constant(Tensor::full(&[width, 1], T::one()));
        let project = |tape: &mut Tape<T>, table: ParamId, labels: &[usize], classes: usize| -> Result<Var> {
            let onehot = tape.constant(one_hot(labels, classes));
            let table = sn(tape, table)?;
            let emb = tape.matmul(onehot, table)?;
            let inner = tape.mul(emb, phi)?;
            let inner = tape.matmul(inner, ones)?;
            tape.add(psi, inner)
        };
        let style_score = project(tape, lay.disc_style_emb, style, cfg.num_styles)?;
        let content_score = project(tape, lay.disc_char_emb, chars, cfg.num_chars)?;
        Ok(DiscOutput {
            style_score,
            content_score,
            layers,
        })
    }
}

/// `[labels.len(), classes]` one-hot rows.
pub fn one_hot<T: Float>(labels: &[usize], classes: usize) -> Tensor<T> {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (r, &l) in labels.iter().enumerate() {
        t.data_mut()[r * classes + l] = T::one();
    }
    t
}
