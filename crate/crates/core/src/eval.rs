//! Quantitative evaluation: independent convolutional classifiers, style /
//! content / both accuracies, style- and content-aware Fréchet distances with
//! their harmonic mean, CAM-variance expert maps, and the in-domain and
//! held-out-component (transfer) protocols.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::{index, IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::allocation::AllocationSolver;
use crate::autodiff::{Tape, Var};
use crate::corpus::{sample_file_name, Corpus};
use crate::error::{Error, Result};
use crate::fewshot::{encode_images, fewshot_generate};
use crate::losses::{allocate, cross_entropy};
use crate::network::Model;
use crate::optim::{Adam, AdamConfig};
use crate::params::{Binding, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Images per forward pass when scoring.
const CHUNK: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    /// Widths of the four conv blocks (strides 1, 2, 2, 2).
    pub channels: [usize; 4],
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Training-time random translation of up to this many pixels.
    pub max_shift: usize,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            channels: [16, 32, 32, 64],
            epochs: 80,
            batch: 32,
            lr: 1e-3,
            max_shift: 2,
            seed: 0,
        }
    }
}

/// A small convolutional classifier trained on corpus renders only; it
/// shares no parameters with the generative model.
#[derive(Clone, Debug)]
pub struct EvalClassifier {
    pub name: String,
    /// Corpus label ids (style or character ids) of the dense outputs.
    pub classes: Vec<usize>,
    pub image_size: usize,
    params: ParamStore<f32>,
    convs: Vec<(ParamId, ParamId, usize)>,
    head: (ParamId, ParamId),
    /// Accuracy on real renders the classifier was not trained on.
    pub test_accuracy: Option<f64>,
}

/// Translates every image by `(dy, dx)` with zero fill.
fn shifted(images: &Tensor<f32>, shifts: &[(isize, isize)]) -> Tensor<f32> {
    let s = images.shape();
    let (h, w) = (s[2] as isize, s[3] as isize);
    let mut out = Tensor::zeros(s);
    for (b, &(dy, dx)) in shifts.iter().enumerate() {
        let src = &images.data()[b * (h * w) as usize..][..(h * w) as usize];
        let dst = &mut out.data_mut()[b * (h * w) as usize..][..(h * w) as usize];
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = (y - dy, x - dx);
                if (0..h).contains(&sy) && (0..w).contains(&sx) {
                    dst[(y * w + x) as usize] = src[(sy * w + sx) as usize];
                }
            }
        }
    }
    out
}

impl EvalClassifier {
    fn init(name: &str, classes: Vec<usize>, image_size: usize, cfg: &ClassifierConfig, rng: &mut impl Rng) -> Self {
        let mut params = ParamStore::new();
        let mut convs = Vec::new();
        let mut cin = 1;
        for (i, (&c, stride)) in cfg.channels.iter().zip([1, 2, 2, 2]).enumerate() {
            let w = params.add_he(format!("conv.{i}.w"), &[c, cin, 3, 3], cin * 9, 1.0, rng);
            let b = params.add_zeros(format!("conv.{i}.b"), &[c]);
            convs.push((w, b, stride));
            cin = c;
        }
        let hw = params.add_he("head.w", &[cin, classes.len()], cin, 1.0, rng);
        let hb = params.add_zeros("head.b", &[classes.len()]);
        EvalClassifier {
            name: name.to_string(),
            classes,
            image_size,
            params,
            convs,
            head: (hw, hb),
            test_accuracy: None,
        }
    }

    /// `(penultimate features [B, C], logits [B, classes])`.
    fn forward(&self, tape: &mut Tape<f32>, vars: &Binding, x: Var) -> Result<(Var, Var)> {
        let mut h = x;
        for &(w, b, stride) in &self.convs {
            h = tape.conv2d(h, vars.var(w), Some(vars.var(b)), stride, 1)?;
            h = tape.relu(h)?;
        }
        let feat = tape.global_avg_pool(h)?;
        let logits = tape.matmul(feat, vars.var(self.head.0))?;
        let logits = tape.bias_add(logits, vars.var(self.head.1))?;
        Ok((feat, logits))
    }

    /// Trains on `images` labelled with corpus ids drawn from `classes`.
    pub fn train(
        name: &str,
        classes: Vec<usize>,
        images: &Tensor<f32>,
        labels: &[usize],
        cfg: &ClassifierConfig,
    ) -> Result<Self> {
        let n = images.shape()[0];
        if n == 0 || n != labels.len() || classes.is_empty() {
            return Err(Error::contract(format!("{name}: need a non-empty labelled training set")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut clf = Self::init(name, classes, images.shape()[2], cfg, &mut rng);
        let dense = clf.dense_labels(labels)?;
        let ids: Vec<ParamId> = clf.params.ids().collect();
        let mut opt = Adam::new(
            AdamConfig {
                lr: cfg.lr,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            &clf.params,
            ids,
        );
        let mut order: Vec<usize> = (0..n).collect();
        let s = cfg.max_shift as i32;
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.batch.max(1)) {
                let x = gather(images, chunk)?;
                let shifts: Vec<(isize, isize)> =
                    chunk.iter().map(|_| (rng.random_range(-s..=s) as isize, rng.random_range(-s..=s) as isize)).collect();
                let x = shifted(&x, &shifts);
                let y: Vec<usize> = chunk.iter().map(|&i| dense[i]).collect();
                let mut tape = Tape::new();
                let vars = clf.params.bind(&mut tape, |_| true);
                let xv = tape.constant(x);
                let (_, logits) = clf.forward(&mut tape, &vars, xv)?;
                let loss = cross_entropy(&mut tape, logits, &y)?;
                let grads = tape.backward(loss)?;
                opt.step(&mut clf.params, |id| grads.get(vars.var(id)));
            }
        }
        Ok(clf)
    }

    fn dense_labels(&self, labels: &[usize]) -> Result<Vec<usize>> {
        labels
            .iter()
            .map(|l| {
                self.classes.iter().position(|c| c == l).ok_or_else(|| {
                    Error::contract(format!("label {l} is outside the label space of classifier `{}`", self.name))
                })
            })
            .collect()
    }

    fn run(&self, images: &Tensor<f32>) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let s = images.shape();
        if s.len() != 4 || s[1] != 1 || s[2] != self.image_size || s[3] != self.image_size {
            return Err(Error::shape(
                "eval classifier",
                s,
                &[0, 1, self.image_size, self.image_size],
            ));
        }
        if s[0] == 0 {
            return Err(Error::contract("cannot classify an empty image set"));
        }
        let (mut feats, mut logits) = (Vec::new(), Vec::new());
        for start in (0..s[0]).step_by(CHUNK) {
            let len = CHUNK.min(s[0] - start);
            let mut tape = Tape::new();
            let vars = self.params.bind(&mut tape, |_| false);
            let x = tape.constant(images.rows(start, len)?);
            let (f, l) = self.forward(&mut tape, &vars, x)?;
            feats.push(tape.value(f).clone());
            logits.push(tape.value(l).clone());
        }
        Ok((Tensor::concat_rows(&feats)?, Tensor::concat_rows(&logits)?))
    }

    /// Penultimate activations `[B, C]`.
    pub fn features(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(self.run(images)?.0)
    }

    /// Predicted corpus label ids (ties go to the lower class index).
    pub fn predict(&self, images: &Tensor<f32>) -> Result<Vec<usize>> {
        let logits = self.run(images)?.1;
        let c = self.classes.len();
        Ok(logits
            .data()
            .chunks(c)
            .map(|row| {
                let best = row
                    .iter()
                    .enumerate()
                    .fold(0, |best, (i, &v)| if v > row[best] { i } else { best });
                self.classes[best]
            })
            .collect())
    }

    /// Per-image correctness against corpus label ids.
    pub fn correct(&self, images: &Tensor<f32>, labels: &[usize]) -> Result<Vec<bool>> {
        if labels.len() != images.shape()[0] {
            return Err(Error::contract("one label per image is required"));
        }
        self.dense_labels(labels)?;
        Ok(self.predict(images)?.iter().zip(labels).map(|(p, l)| p == l).collect())
    }

    pub fn accuracy(&self, images: &Tensor<f32>, labels: &[usize]) -> Result<f64> {
        let ok = self.correct(images, labels)?;
        Ok(ok.iter().filter(|&&c| c).count() as f64 / ok.len() as f64)
    }

    pub fn chance_rate(&self) -> f64 {
        1.0 / self.classes.len() as f64
    }
}

fn gather(images: &Tensor<f32>, rows: &[usize]) -> Result<Tensor<f32>> {
    let parts = rows.iter().map(|&r| images.rows(r, 1)).collect::<Result<Vec<_>>>()?;
    Tensor::concat_rows(&parts)
}

/// Style, content and joint accuracy of a generated set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub acc_s: f64,
    pub acc_c: f64,
    pub acc_b: f64,
    pub count: usize,
}

/// Scores generated glyphs against their intended style and character.
pub fn accuracy_eval(
    style: &EvalClassifier,
    content: &EvalClassifier,
    images: &Tensor<f32>,
    style_ids: &[usize],
    char_ids: &[usize],
) -> Result<Accuracy> {
    let n = images.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return Err(Error::contract("accuracy of an empty image set is undefined"));
    }
    let s = style.correct(images, style_ids)?;
    let c = content.correct(images, char_ids)?;
    let count = |f: &dyn Fn(usize) -> bool| (0..n).filter(|&i| f(i)).count() as f64 / n as f64;
    Ok(Accuracy {
        acc_s: count(&|i| s[i]),
        acc_c: count(&|i| c[i]),
        acc_b: count(&|i| s[i] && c[i]),
        count: n,
    })
}

/// Mean and covariance of feature rows.
#[derive(Clone, Debug)]
pub struct FrechetStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl FrechetStats {
    /// From `[N, D]` features. With fewer than `D + 1` rows the covariance is
    /// rank-deficient, so a small ridge (1e-6 of the mean variance) is added.
    pub fn from_features(features: &Tensor<f32>) -> Result<Self> {
        let s = features.shape();
        if s.len() != 2 || s[0] < 2 {
            return Err(Error::contract("Fréchet statistics need at least two feature rows"));
        }
        let (n, d) = (s[0], s[1]);
        let x = DMatrix::from_row_iterator(n, d, features.data().iter().map(|&v| v as f64));
        Ok(Self::from_matrix(&x))
    }

    pub fn from_matrix(x: &DMatrix<f64>) -> Self {
        let (n, d) = x.shape();
        let mean = DVector::from_iterator(d, (0..d).map(|j| x.column(j).sum() / n as f64));
        let mut centred = x.clone();
        for j in 0..d {
            centred.column_mut(j).add_scalar_mut(-mean[j]);
        }
        let mut cov = centred.transpose() * &centred / (n as f64 - 1.0);
        if n < d + 1 {
            let ridge = 1e-6 * (cov.trace() / d as f64).max(1e-12);
            for i in 0..d {
                cov[(i, i)] += ridge;
            }
        }
        FrechetStats { mean, cov }
    }
}

/// Symmetric PSD square root; negative eigenvalues (round-off) are clamped
/// at zero with a warning when they are not negligible.
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().fold(0.0f64, |a, &v| a.max(v.abs())).max(1e-300);
    let clamped = eig.eigenvalues.map(|v| {
        if v < -1e-9 * scale {
            log::warn!("clamping eigenvalue {v:.3e} of a covariance product to 0");
        }
        v.max(0.0).sqrt()
    });
    &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose()
}

/// `‖μ₁ − μ₂‖² + tr(Σ₁ + Σ₂ − 2(Σ₁Σ₂)^{1/2})`, with the cross term taken as
/// `tr((Σ₁^{1/2} Σ₂ Σ₁^{1/2})^{1/2})`, which has the same eigenvalues.
pub fn frechet_distance(a: &FrechetStats, b: &FrechetStats) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::shape("frechet", &[a.mean.len()], &[b.mean.len()]));
    }
    let diff = (&a.mean - &b.mean).norm_squared();
    let s1 = psd_sqrt(&a.cov);
    let cross = psd_sqrt(&(&s1 * &b.cov * &s1)).trace();
    Ok((diff + a.cov.trace() + b.cov.trace() - 2.0 * cross).max(0.0))
}

/// `2xy / (x + y)`, and 0 when both are 0.
pub fn harmonic_mean(x: f64, y: f64) -> f64 {
    if x + y == 0.0 {
        0.0
    } else {
        2.0 * x * y / (x + y)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidScores {
    pub fid_s: f64,
    pub fid_c: f64,
    pub fid_h: f64,
}

/// Style-aware FID (style classifier features against a style-matched real
/// set), content-aware FID (content classifier features against a
/// content-matched set) and their harmonic mean.
pub fn fid_harmonic(
    style: &EvalClassifier,
    content: &EvalClassifier,
    generated: &Tensor<f32>,
    real_style: &Tensor<f32>,
    real_content: &Tensor<f32>,
) -> Result<FidScores> {
    let fd = |clf: &EvalClassifier, real: &Tensor<f32>| -> Result<f64> {
        let g = FrechetStats::from_features(&clf.features(generated)?)?;
        let r = FrechetStats::from_features(&clf.features(real)?)?;
        frechet_distance(&g, &r)
    };
    let fid_s = fd(style, real_style)?;
    let fid_c = fd(content, real_content)?;
    Ok(FidScores {
        fid_s,
        fid_c,
        fid_h: harmonic_mean(fid_s, fid_c),
    })
}

/// Per-pixel variance of equally sized maps, divided by its maximum (all
/// zeros when the maps are identical).
pub fn normalized_variance(maps: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = maps.first().ok_or_else(|| Error::contract("no maps to aggregate"))?;
    if maps.iter().any(|m| m.len() != first.len()) {
        return Err(Error::contract("maps differ in size"));
    }
    let n = maps.len() as f64;
    let var: Vec<f64> = (0..first.len())
        .map(|p| {
            let mean = maps.iter().map(|m| m[p]).sum::<f64>() / n;
            maps.iter().map(|m| (m[p] - mean).powi(2)).sum::<f64>() / n
        })
        .collect();
    let max = var.iter().copied().fold(0.0, f64::max);
    Ok(if max > 0.0 { var.iter().map(|v| v / max).collect() } else { var })
}

/// Nearest-neighbour upsampling of a row-major `w×w` map to `size×size`.
fn upsample_map(map: &[f64], w: usize, size: usize) -> Vec<f64> {
    (0..size * size)
        .map(|i| {
            let (y, x) = (i / size, i % size);
            map[(y * w / size) * w + x * w / size]
        })
        .collect()
}

/// One `[size×size]` map per expert: the variance over `samples` of the CAM
/// of each glyph's top allocated component, computed from that expert's
/// content feature and the component head.
pub fn cam_variance(
    model: &Model<f32>,
    corpus: &Corpus,
    samples: &[usize],
    solver: &dyn AllocationSolver,
) -> Result<Vec<Vec<f64>>> {
    if samples.is_empty() {
        return Err(Error::contract("CAM variance needs at least one glyph"));
    }
    let k = model.cfg.k;
    let w = model.cfg.latent_size();
    let d = model.cfg.d;
    let enc = encode_images(model, &corpus.images(samples))?;
    let comps: Vec<&[usize]> = samples
        .iter()
        .map(|&s| corpus.components_of(corpus.manifest.samples[s].char_id))
        .collect();
    // allocation over the component heads, as in training
    let mut tape = Tape::new();
    let net = model.bind(&mut tape, |_| false);
    let mut logits = Vec::with_capacity(k);
    for f in &enc.content {
        let fv = tape.constant(f.clone());
        logits.push(net.classify(&mut tape, fv)?.1);
    }
    let alloc = allocate(&tape, &logits, &comps, solver)?;
    let mut maps = vec![Vec::with_capacity(samples.len()); k];
    for (b, (u, a)) in comps.iter().zip(&alloc).enumerate() {
        for i in 0..k {
            let row = &tape.value(logits[i]).data()[b * model.cfg.num_components..][..model.cfg.num_components];
            // among the components allocated to expert i, the most probable
            let top = (0..u.len())
                .filter(|&j| a.get(i, j))
                .map(|j| u[j])
                .fold(None, |best: Option<usize>, c| match best {
                    Some(o) if row[o] >= row[c] => Some(o),
                    _ => Some(c),
                })
                .expect("every expert receives at least one component");
            let feat = &enc.content[i].data()[b * d * w * w..][..d * w * w];
            let cam = model.component_cam(feat, top)?;
            maps[i].push(cam.iter().map(|&v| v as f64).collect::<Vec<f64>>());
        }
    }
    maps.iter()
        .map(|m| Ok(upsample_map(&normalized_variance(m)?, w, model.cfg.image_size)))
        .collect()
}

/// Index of the largest value (first on ties).
pub fn argmax(map: &[f64]) -> usize {
    map.iter()
        .enumerate()
        .fold(0, |best, (i, &v)| if v > map[best] { i } else { best })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    /// Unseen styles × unseen characters built from training components.
    Indomain,
    /// Unseen styles × characters containing reserved components.
    Transfer,
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "indomain" => Ok(Split::Indomain),
            "transfer" => Ok(Split::Transfer),
            other => Err(Error::Unknown {
                kind: "split",
                name: other.to_string(),
                available: "indomain, transfer".into(),
            }),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Indomain => "indomain",
            Split::Transfer => "transfer",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Repetitions with different reference glyphs.
    pub runs: usize,
    /// Reference glyphs per unseen style.
    pub refs: usize,
    pub seed: u64,
    pub classifier: ClassifierConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            runs: 10,
            refs: 4,
            seed: 0,
            classifier: ClassifierConfig::default(),
        }
    }
}

/// The three evaluation classifiers of a corpus.
///
/// Like the reference protocol, each classifier learns from real renders of
/// its whole label space, the unseen styles included; only the glyphs of
/// [`EvalSuite::test_pairs`] are kept back to measure its own accuracy.
#[derive(Clone, Debug)]
pub struct EvalSuite {
    /// Held-out styles, trained on their renders of training and held-out
    /// characters.
    pub style: EvalClassifier,
    /// Held-out characters, trained on their renders in every style.
    pub content: EvalClassifier,
    /// Held-out-component characters, trained on their renders in every style.
    pub transfer: EvalClassifier,
}

type Labelled = (Vec<usize>, Vec<usize>, Vec<usize>);

/// `(sample, style, character)` columns of `styles × chars`, minus `skip`.
fn pairs(corpus: &Corpus, styles: &[usize], chars: &[usize], skip: &[(usize, usize)]) -> Labelled {
    let (mut samples, mut s_ids, mut c_ids) = (Vec::new(), Vec::new(), Vec::new());
    for &s in styles {
        for &c in chars {
            if skip.contains(&(s, c)) {
                continue;
            }
            samples.push(corpus.sample_index(s, c));
            s_ids.push(s);
            c_ids.push(c);
        }
    }
    (samples, s_ids, c_ids)
}

fn columns(corpus: &Corpus, list: &[(usize, usize)]) -> Labelled {
    (
        list.iter().map(|&(s, c)| corpus.sample_index(s, c)).collect(),
        list.iter().map(|p| p.0).collect(),
        list.iter().map(|p| p.1).collect(),
    )
}

impl EvalSuite {
    /// Held-out glyphs never shown to the classifiers: character `chars[i]`
    /// in held-out style `i mod |held-out styles|`.
    pub fn test_pairs(corpus: &Corpus, chars: &[usize]) -> Vec<(usize, usize)> {
        let hs = &corpus.splits().heldout_styles;
        chars.iter().enumerate().map(|(i, &c)| (hs[i % hs.len()], c)).collect()
    }

    pub fn train(corpus: &Corpus, cfg: &ClassifierConfig) -> Result<Self> {
        let sp = corpus.splits();
        let fit = |name: &str, classes: &[usize], train: Labelled, test: Labelled, by_style: bool, seed: u64| -> Result<EvalClassifier> {
            let labels = if by_style { &train.1 } else { &train.2 };
            let c = ClassifierConfig { seed, ..cfg.clone() };
            let mut clf = EvalClassifier::train(name, classes.to_vec(), &corpus.images(&train.0), labels, &c)?;
            let test_labels = if by_style { &test.1 } else { &test.2 };
            clf.test_accuracy = Some(clf.accuracy(&corpus.images(&test.0), test_labels)?);
            log::info!("eval classifier {name}: test accuracy {:.3}", clf.test_accuracy.unwrap());
            Ok(clf)
        };
        if sp.heldout_styles.is_empty() || sp.heldout_chars.is_empty() || sp.transfer_chars.is_empty() {
            return Err(Error::contract("evaluation needs held-out styles, characters and transfer characters"));
        }
        let all_styles: Vec<usize> = sp.train_styles.iter().chain(&sp.heldout_styles).copied().collect();
        let known_chars: Vec<usize> = sp.train_chars.iter().chain(&sp.heldout_chars).copied().collect();
        let held = Self::test_pairs(corpus, &sp.heldout_chars);
        let transfer = Self::test_pairs(corpus, &sp.transfer_chars);
        Ok(EvalSuite {
            style: fit(
                "style",
                &sp.heldout_styles,
                pairs(corpus, &sp.heldout_styles, &known_chars, &held),
                columns(corpus, &held),
                true,
                cfg.seed,
            )?,
            content: fit(
                "content",
                &sp.heldout_chars,
                pairs(corpus, &all_styles, &sp.heldout_chars, &held),
                columns(corpus, &held),
                false,
                cfg.seed + 1,
            )?,
            transfer: fit(
                "transfer",
                &sp.transfer_chars,
                pairs(corpus, &all_styles, &sp.transfer_chars, &transfer),
                columns(corpus, &transfer),
                false,
                cfg.seed + 2,
            )?,
        })
    }

    pub fn content_for(&self, split: Split) -> &EvalClassifier {
        match split {
            Split::Indomain => &self.content,
            Split::Transfer => &self.transfer,
        }
    }
}

/// Generated glyphs with their intended labels and provenance.
#[derive(Clone, Debug)]
pub struct GeneratedSet {
    pub images: Tensor<f32>,
    pub style_ids: Vec<usize>,
    pub char_ids: Vec<usize>,
    /// File names of the style references used for each glyph.
    pub reference_files: Vec<Vec<String>>,
    /// File name of each glyph's source (content) glyph.
    pub source_files: Vec<String>,
}

/// Target characters of a split.
pub fn split_chars(corpus: &Corpus, split: Split) -> &[usize] {
    match split {
        Split::Indomain => &corpus.splits().heldout_chars,
        Split::Transfer => &corpus.splits().transfer_chars,
    }
}

/// One evaluation run: for every unseen style, `refs` reference glyphs of
/// training characters (sorted by file name) and, for every target
/// character, a source glyph from a random training style.
pub fn generate_eval_set(model: &Model<f32>, corpus: &Corpus, split: Split, run: usize, cfg: &EvalConfig) -> Result<GeneratedSet> {
    let sp = corpus.splits();
    let chars = split_chars(corpus, split);
    if cfg.refs == 0 || cfg.refs > sp.train_chars.len() {
        return Err(Error::contract(format!(
            "{} references requested but {} training characters exist",
            cfg.refs,
            sp.train_chars.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(run as u64 + 1);
    let mut out = GeneratedSet {
        images: Tensor::zeros(&[0]),
        style_ids: Vec::new(),
        char_ids: Vec::new(),
        reference_files: Vec::new(),
        source_files: Vec::new(),
    };
    let mut parts = Vec::new();
    for &s in &sp.heldout_styles {
        let mut refs: Vec<usize> = index::sample(&mut rng, sp.train_chars.len(), cfg.refs)
            .iter()
            .map(|i| corpus.sample_index(s, sp.train_chars[i]))
            .collect();
        refs.sort_by_key(|&r| corpus.manifest.samples[r].file.clone());
        let ref_files: Vec<String> = refs.iter().map(|&r| corpus.manifest.samples[r].file.clone()).collect();
        let sources: Vec<usize> = chars
            .iter()
            .map(|&c| corpus.sample_index(*sp.train_styles.choose(&mut rng).unwrap(), c))
            .collect();
        parts.push(fewshot_generate(model, &corpus.images(&refs), &corpus.images(&sources))?);
        for (&c, &src) in chars.iter().zip(&sources) {
            out.style_ids.push(s);
            out.char_ids.push(c);
            out.reference_files.push(ref_files.clone());
            out.source_files.push(corpus.manifest.samples[src].file.clone());
        }
    }
    out.images = Tensor::concat_rows(&parts)?;
    Ok(out)
}

/// Aggregated results of one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub runs: usize,
    /// Means over runs.
    pub acc_s: f64,
    pub acc_c: f64,
    pub acc_b: f64,
    pub per_run: Vec<Accuracy>,
    pub fid: FidScores,
    /// Accuracies of the eval classifiers on real renders of the same pairs.
    pub style_classifier_test_acc: f64,
    pub content_classifier_test_acc: f64,
    pub content_chance_rate: f64,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "split,runs,acc_s,acc_c,acc_b,fid_s,fid_c,fid_h";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.split, self.runs, self.acc_s, self.acc_c, self.acc_b, self.fid.fid_s, self.fid.fid_c, self.fid.fid_h
        )
    }
}

/// Runs the few-shot protocol `cfg.runs` times and scores the glyphs.
pub fn evaluate(model: &Model<f32>, corpus: &Corpus, suite: &EvalSuite, split: Split, cfg: &EvalConfig) -> Result<EvalReport> {
    if cfg.runs == 0 {
        return Err(Error::contract("at least one evaluation run is required"));
    }
    let content = suite.content_for(split);
    let mut per_run = Vec::with_capacity(cfg.runs);
    let mut generated = Vec::with_capacity(cfg.runs);
    for run in 0..cfg.runs {
        let set = generate_eval_set(model, corpus, split, run, cfg)?;
        per_run.push(accuracy_eval(&suite.style, content, &set.images, &set.style_ids, &set.char_ids)?);
        generated.push(set.images);
    }
    let generated = Tensor::concat_rows(&generated)?;
    let sp = corpus.splits();
    let chars = split_chars(corpus, split);
    // real references: the ground-truth renders of the requested glyphs
    let real = corpus.images(&pairs(corpus, &sp.heldout_styles, chars, &[]).0);

    let fid = fid_harmonic(&suite.style, content, &generated, &real, &real)?;
    let mean = |f: fn(&Accuracy) -> f64| per_run.iter().map(f).sum::<f64>() / per_run.len() as f64;
    Ok(EvalReport {
        split,
        runs: cfg.runs,
        acc_s: mean(|a| a.acc_s),
        acc_c: mean(|a| a.acc_c),
        acc_b: mean(|a| a.acc_b),
        fid,
        style_classifier_test_acc: suite.style.test_accuracy.unwrap_or(f64::NAN),
        content_classifier_test_acc: content.test_accuracy.unwrap_or(f64::NAN),
        content_chance_rate: content.chance_rate(),
        per_run,
    })
}

/// Few-shot references: glyphs of one style, always averaged in file-name
/// order so the result does not depend on the order they were given in.
#[derive(Clone, Debug)]
pub struct ReferenceSet {
    pub style_id: usize,
    entries: Vec<(String, Tensor<f32>)>,
}

impl ReferenceSet {
    /// `(file name, style id, [1, 1, H, W] glyph)` triples.
    pub fn new(mut refs: Vec<(String, usize, Tensor<f32>)>) -> Result<Self> {
        let style_id = refs.first().ok_or_else(|| Error::contract("a reference set needs n_r ≥ 1 glyphs"))?.1;
        if let Some((name, s, _)) = refs.iter().find(|r| r.1 != style_id) {
            return Err(Error::contract(format!(
                "reference {name} has style {s} but the set has style {style_id}"
            )));
        }
        refs.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(ReferenceSet {
            style_id,
            entries: refs.into_iter().map(|(n, _, t)| (n, t)).collect(),
        })
    }

    /// References of `style_id` drawn from the corpus.
    pub fn from_corpus(corpus: &Corpus, style_id: usize, chars: &[usize]) -> Result<Self> {
        Self::new(
            chars
                .iter()
                .map(|&c| (sample_file_name(style_id, c), style_id, corpus.images(&[corpus.sample_index(style_id, c)])))
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn files(&self) -> Vec<&str> {
        self.entries.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn images(&self) -> Result<Tensor<f32>> {
        Tensor::concat_rows(&self.entries.iter().map(|(_, t)| t.clone()).collect::<Vec<_>>())
    }

    /// One glyph per source in this set's style.
    pub fn generate(&self, model: &Model<f32>, sources: &Tensor<f32>) -> Result<Tensor<f32>> {
        fewshot_generate(model, &self.images()?, sources)
    }
}
