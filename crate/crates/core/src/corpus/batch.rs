//! Training mini-batches: each target glyph comes with `n` style references
//! (same style, other characters) and `n` content references (same
//! character, other styles), all drawn from the training split.

use rand::seq::index;
use rand::Rng;

use super::Corpus;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Target {
    pub style_id: usize,
    pub char_id: usize,
    /// Index of the ground-truth glyph in the corpus.
    pub sample: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiniBatch {
    pub n: usize,
    pub targets: Vec<Target>,
    /// `n` sample indices per target, target-major.
    pub style_refs: Vec<usize>,
    pub content_refs: Vec<usize>,
}

impl MiniBatch {
    pub fn style_refs_of(&self, t: usize) -> &[usize] {
        &self.style_refs[t * self.n..(t + 1) * self.n]
    }

    pub fn content_refs_of(&self, t: usize) -> &[usize] {
        &self.content_refs[t * self.n..(t + 1) * self.n]
    }

    /// Every reference slot in the order the encoder sees them: all style
    /// references followed by all content references.
    pub fn reference_samples(&self) -> Vec<usize> {
        self.style_refs.iter().chain(&self.content_refs).copied().collect()
    }

    pub fn target_samples(&self) -> Vec<usize> {
        self.targets.iter().map(|t| t.sample).collect()
    }
}

/// Draws `targets_per_step` training targets and their references.
pub fn sample_batch(corpus: &Corpus, n: usize, targets_per_step: usize, rng: &mut impl Rng) -> Result<MiniBatch> {
    if n == 0 || targets_per_step == 0 {
        return Err(Error::contract("a mini-batch needs n ≥ 1 and at least one target"));
    }
    let splits = corpus.splits();
    let (styles, chars) = (&splits.train_styles, &splits.train_chars);
    // every (style, char) pair exists, so a label has |pool| − 1 candidates
    // besides the target; with fewer than n + 1 no label can be used
    if styles.len() < n + 1 || chars.len() < n + 1 {
        return Err(Error::contract(format!(
            "n={n} references need at least {} training styles and characters (have {} and {})",
            n + 1,
            styles.len(),
            chars.len()
        )));
    }
    let mut batch = MiniBatch {
        n,
        targets: Vec::with_capacity(targets_per_step),
        style_refs: Vec::with_capacity(n * targets_per_step),
        content_refs: Vec::with_capacity(n * targets_per_step),
    };
    for _ in 0..targets_per_step {
        let si = rng.random_range(0..styles.len());
        let ci = rng.random_range(0..chars.len());
        let (style_id, char_id) = (styles[si], chars[ci]);
        batch.targets.push(Target {
            style_id,
            char_id,
            sample: corpus.sample_index(style_id, char_id),
        });
        // draw from the pool minus the target's own entry
        for k in index::sample(rng, chars.len() - 1, n) {
            let c = chars[if k >= ci { k + 1 } else { k }];
            batch.style_refs.push(corpus.sample_index(style_id, c));
        }
        for k in index::sample(rng, styles.len() - 1, n) {
            let s = styles[if k >= si { k + 1 } else { k }];
            batch.content_refs.push(corpus.sample_index(s, char_id));
        }
    }
    Ok(batch)
}
