//! Inference-time generation: references are encoded once, their per-expert
//! style (or content) features averaged, and the averages decoded.
//!
//! Averages are accumulated in f64 over the references in the order given
//! and rounded once, so `n` copies of the same reference reproduce the
//! single-reference features bit-exactly.

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::network::Model;
use crate::tensor::Tensor;

/// Images encoded per tape; bounds peak memory on large sets.
const CHUNK: usize = 64;

/// Per-expert style and content features of a set of images, as plain
/// `[B, d, w, h]` tensors.
#[derive(Clone, Debug)]
pub struct EncodedSet {
    pub style: Vec<Tensor<f32>>,
    pub content: Vec<Tensor<f32>>,
}

/// Encodes `[B, 1, H, W]` images without recording gradients.
pub fn encode_images(model: &Model<f32>, images: &Tensor<f32>) -> Result<EncodedSet> {
    let b = images.shape()[0];
    if b == 0 {
        return Err(Error::contract("cannot encode an empty image set"));
    }
    let k = model.cfg.k;
    let mut style: Vec<Vec<Tensor<f32>>> = vec![Vec::new(); k];
    let mut content: Vec<Vec<Tensor<f32>>> = vec![Vec::new(); k];
    for start in (0..b).step_by(CHUNK) {
        let len = CHUNK.min(b - start);
        let mut tape = Tape::new();
        let net = model.bind(&mut tape, |_| false);
        let x = tape.constant(images.rows(start, len)?);
        let feats = net.encode(&mut tape, x)?;
        for i in 0..k {
            style[i].push(tape.value(feats.style[i]).clone());
            content[i].push(tape.value(feats.content[i]).clone());
        }
    }
    Ok(EncodedSet {
        style: style.iter().map(|p| Tensor::concat_rows(p)).collect::<Result<_>>()?,
        content: content.iter().map(|p| Tensor::concat_rows(p)).collect::<Result<_>>()?,
    })
}

/// Row-group means of `[B, …]` features: one output row per group.
pub fn group_means(features: &Tensor<f32>, groups: &[Vec<usize>]) -> Result<Tensor<f32>> {
    let b = features.shape()[0];
    let row = features.numel() / b.max(1);
    let mut out = Vec::with_capacity(groups.len() * row);
    let mut acc = vec![0f64; row];
    for g in groups {
        if g.is_empty() {
            return Err(Error::contract("a reference group is empty"));
        }
        acc.iter_mut().for_each(|a| *a = 0.0);
        for &r in g {
            if r >= b {
                return Err(Error::contract(format!("reference {r} out of range ({b} encoded)")));
            }
            for (a, &x) in acc.iter_mut().zip(&features.data()[r * row..(r + 1) * row]) {
                *a += x as f64;
            }
        }
        let n = g.len() as f64;
        out.extend(acc.iter().map(|&a| (a / n) as f32));
    }
    let mut shape = features.shape().to_vec();
    shape[0] = groups.len();
    Tensor::new(shape, out)
}

/// Decodes per-expert `[T, d, w, h]` style and content features.
pub fn decode(model: &Model<f32>, style: &[Tensor<f32>], content: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    let t = style.first().map_or(0, |s| s.shape()[0]);
    if t == 0 {
        return Err(Error::contract("nothing to generate"));
    }
    let mut parts = Vec::new();
    for start in (0..t).step_by(CHUNK) {
        let len = CHUNK.min(t - start);
        let mut tape = Tape::new();
        let net = model.bind(&mut tape, |_| false);
        let s = style
            .iter()
            .map(|x| Ok(tape.constant(x.rows(start, len)?)))
            .collect::<Result<Vec<_>>>()?;
        let c = content
            .iter()
            .map(|x| Ok(tape.constant(x.rows(start, len)?)))
            .collect::<Result<Vec<_>>>()?;
        let y = net.generate(&mut tape, &s, &c)?;
        parts.push(tape.value(y).clone());
    }
    Tensor::concat_rows(&parts)
}

/// Generates one glyph per target `t`: style from the mean over
/// `style_groups[t]`, content from the mean over `content_groups[t]`, both
/// indexing rows of `images`.
pub fn generate_grouped(
    model: &Model<f32>,
    images: &Tensor<f32>,
    style_groups: &[Vec<usize>],
    content_groups: &[Vec<usize>],
) -> Result<Tensor<f32>> {
    if style_groups.len() != content_groups.len() {
        return Err(Error::contract("one style and one content group per target"));
    }
    let enc = encode_images(model, images)?;
    let style = enc.style.iter().map(|f| group_means(f, style_groups)).collect::<Result<Vec<_>>>()?;
    let content = enc.content.iter().map(|f| group_means(f, content_groups)).collect::<Result<Vec<_>>>()?;
    decode(model, &style, &content)
}

/// Few-shot generation: every source glyph rendered in the style averaged
/// over `refs` (`[n_r, 1, H, W]`, all of one style, in caller order).
pub fn fewshot_generate(model: &Model<f32>, refs: &Tensor<f32>, sources: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (nr, ns) = (refs.shape()[0], sources.shape()[0]);
    if nr == 0 {
        return Err(Error::contract("few-shot generation needs at least one reference"));
    }
    if ns == 0 {
        return Err(Error::contract("few-shot generation needs at least one source glyph"));
    }
    let refs_enc = encode_images(model, refs)?;
    let src_enc = encode_images(model, sources)?;
    let all: Vec<usize> = (0..nr).collect();
    let style = refs_enc
        .style
        .iter()
        .map(|f| {
            let mean = group_means(f, std::slice::from_ref(&all))?;
            Tensor::concat_rows(&vec![mean; ns])
        })
        .collect::<Result<Vec<_>>>()?;
    decode(model, &style, &src_enc.content)
}
