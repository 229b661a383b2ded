//! Procedurally generated compositional glyph corpus.
//!
//! Components are small stroke sets anchored to a slot of the glyph cell;
//! a character is a set of 1–4 components in distinct slots; a style is a
//! rendering transform. Every image is a pure function of
//! `(character, style, seed)` and is stored as an 8-bit PGM next to a JSON
//! manifest holding the decomposition table, style parameters and splits.

mod batch;
pub mod pgm;
mod render;

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use batch::{sample_batch, MiniBatch, Target};
pub use render::{render, sample_styles, ComponentGlyphSpec, Slot, StyleSpec, Stroke};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

/// Probability of drawing a character with 1, 2, 3 or 4 components.
const COMPONENT_COUNT_WEIGHTS: [f64; 4] = [0.15, 0.4, 0.3, 0.15];
/// Minimum share of characters every component must appear in.
const MIN_COMPONENT_FREQUENCY: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub components: usize,
    pub styles: usize,
    pub chars: usize,
    pub seed: u64,
    pub image_size: usize,
    /// Component ids (the highest ones) kept out of every training character.
    pub reserved_components: usize,
    pub heldout_style_fraction: f64,
    pub heldout_char_fraction: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            components: 10,
            styles: 16,
            chars: 200,
            seed: 7,
            image_size: 32,
            reserved_components: 2,
            heldout_style_fraction: 0.25,
            heldout_char_fraction: 0.15,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.components < 6 {
            return Err(Error::config(format!("need at least 6 components, got {}", self.components)));
        }
        if self.styles < 4 {
            return Err(Error::config(format!("need at least 4 styles, got {}", self.styles)));
        }
        if self.chars < 20 {
            return Err(Error::config(format!("need at least 20 characters, got {}", self.chars)));
        }
        if self.image_size < 8 {
            return Err(Error::config("image size must be at least 8"));
        }
        if self.reserved_components + 4 > self.components {
            return Err(Error::config("too many reserved components for the vocabulary"));
        }
        for (name, f) in [
            ("heldout_style_fraction", self.heldout_style_fraction),
            ("heldout_char_fraction", self.heldout_char_fraction),
        ] {
            if !(0.0..1.0).contains(&f) {
                return Err(Error::config(format!("{name} must lie in [0, 1), got {f}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CharacterEntry {
    pub char_id: usize,
    /// Sorted component ids (the decomposition-table entry U_c).
    pub components: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CharSplit {
    Train,
    Heldout,
    Transfer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StyleSplit {
    Train,
    Heldout,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train_styles: Vec<usize>,
    pub heldout_styles: Vec<usize>,
    pub train_chars: Vec<usize>,
    pub heldout_chars: Vec<usize>,
    /// Characters containing a reserved component.
    pub transfer_chars: Vec<usize>,
    pub reserved_components: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub file: String,
    pub style_id: usize,
    pub char_id: usize,
    pub style_split: StyleSplit,
    pub char_split: CharSplit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub config: CorpusConfig,
    pub components: Vec<ComponentGlyphSpec>,
    pub styles: Vec<StyleSpec>,
    pub characters: Vec<CharacterEntry>,
    pub splits: Splits,
    /// Style-major: sample `s·N + c` is style `s`, character `c`.
    pub samples: Vec<SampleEntry>,
}

pub fn sample_file_name(style_id: usize, char_id: usize) -> String {
    format!("{style_id}_{char_id}.pgm")
}

/// A corpus held in memory: manifest plus every raster.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub manifest: Manifest,
    pixels: Vec<Vec<u8>>,
    train_style_index: HashMap<usize, usize>,
    train_char_index: HashMap<usize, usize>,
}

fn sample_characters(cfg: &CorpusConfig, components: &[ComponentGlyphSpec], rng: &mut ChaCha8Rng) -> Result<Vec<Vec<usize>>> {
    let v = cfg.components;
    let limit = 2000 * cfg.chars;
    let mut seen: BTreeSet<Vec<usize>> = BTreeSet::new();
    let mut chars = Vec::with_capacity(cfg.chars);
    let mut attempts = 0;
    while chars.len() < cfg.chars {
        attempts += 1;
        if attempts > limit {
            return Err(Error::config(format!(
                "could only place {} distinct characters from {v} components (asked for {})",
                chars.len(),
                cfg.chars
            )));
        }
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut m = 4;
        for (i, w) in COMPONENT_COUNT_WEIGHTS.iter().enumerate() {
            acc += w;
            if u < acc {
                m = i + 1;
                break;
            }
        }
        let mut ids: Vec<usize> = rand::seq::index::sample(rng, v, m.min(v)).into_vec();
        ids.sort_unstable();
        let slots: BTreeSet<Slot> = ids.iter().map(|&i| components[i].anchor_slot).collect();
        if slots.len() != ids.len() {
            continue; // slot conflict
        }
        if seen.insert(ids.clone()) {
            chars.push(ids);
        }
    }
    Ok(chars)
}

impl Corpus {
    /// Generates the whole corpus in memory.
    pub fn build(cfg: &CorpusConfig) -> Result<Corpus> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let components: Vec<ComponentGlyphSpec> = (0..cfg.components)
            .map(|id| ComponentGlyphSpec::random(id, Slot::ALL[id % Slot::ALL.len()], &mut rng))
            .collect();
        let styles = sample_styles(cfg.styles, &mut rng);

        let reserved: Vec<usize> = (cfg.components - cfg.reserved_components..cfg.components).collect();
        let mut chars = None;
        for _ in 0..20 {
            let cand = sample_characters(cfg, &components, &mut rng)?;
            let min_count = (MIN_COMPONENT_FREQUENCY * cfg.chars as f64).ceil() as usize;
            let covered = (0..cfg.components).all(|j| cand.iter().filter(|c| c.contains(&j)).count() >= min_count);
            let has_transfer = cand.iter().any(|c| c.iter().any(|j| reserved.contains(j)));
            let in_domain = cand.iter().filter(|c| !c.iter().any(|j| reserved.contains(j))).count();
            if covered && (reserved.is_empty() || has_transfer) && in_domain >= 8 {
                chars = Some(cand);
                break;
            }
        }
        let chars = chars.ok_or_else(|| {
            Error::config("could not sample characters covering every component at least 2% of the time")
        })?;
        let characters: Vec<CharacterEntry> = chars
            .into_iter()
            .enumerate()
            .map(|(char_id, components)| CharacterEntry { char_id, components })
            .collect();

        let mut style_order: Vec<usize> = (0..cfg.styles).collect();
        style_order.shuffle(&mut rng);
        let n_heldout_styles = ((cfg.heldout_style_fraction * cfg.styles as f64).round() as usize).max(1);
        let mut heldout_styles = style_order[..n_heldout_styles].to_vec();
        let mut train_styles = style_order[n_heldout_styles..].to_vec();

        let (transfer_chars, mut in_domain): (Vec<usize>, Vec<usize>) = characters
            .iter()
            .map(|c| c.char_id)
            .partition(|&c| characters[c].components.iter().any(|j| reserved.contains(j)));
        in_domain.shuffle(&mut rng);
        let n_heldout_chars = ((cfg.heldout_char_fraction * in_domain.len() as f64).round() as usize).max(1);
        let mut heldout_chars = in_domain[..n_heldout_chars].to_vec();
        let mut train_chars = in_domain[n_heldout_chars..].to_vec();
        for v in [&mut heldout_styles, &mut train_styles, &mut heldout_chars, &mut train_chars] {
            v.sort_unstable();
        }
        let splits = Splits {
            train_styles,
            heldout_styles,
            train_chars,
            heldout_chars,
            transfer_chars,
            reserved_components: reserved,
        };

        let mut samples = Vec::with_capacity(cfg.styles * cfg.chars);
        let mut pixels = Vec::with_capacity(cfg.styles * cfg.chars);
        for style in &styles {
            for ch in &characters {
                let parts: Vec<&ComponentGlyphSpec> = ch.components.iter().map(|&j| &components[j]).collect();
                pixels.push(render(&parts, style, cfg.image_size));
                samples.push(SampleEntry {
                    file: sample_file_name(style.style_id, ch.char_id),
                    style_id: style.style_id,
                    char_id: ch.char_id,
                    style_split: if splits.train_styles.binary_search(&style.style_id).is_ok() {
                        StyleSplit::Train
                    } else {
                        StyleSplit::Heldout
                    },
                    char_split: if splits.train_chars.binary_search(&ch.char_id).is_ok() {
                        CharSplit::Train
                    } else if splits.heldout_chars.binary_search(&ch.char_id).is_ok() {
                        CharSplit::Heldout
                    } else {
                        CharSplit::Transfer
                    },
                });
            }
        }
        let manifest = Manifest {
            version: MANIFEST_VERSION,
            config: cfg.clone(),
            components,
            styles,
            characters,
            splits,
            samples,
        };
        Ok(Corpus::from_parts(manifest, pixels))
    }

    fn from_parts(manifest: Manifest, pixels: Vec<Vec<u8>>) -> Corpus {
        let index = |ids: &[usize]| ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        Corpus {
            train_style_index: index(&manifest.splits.train_styles),
            train_char_index: index(&manifest.splits.train_chars),
            manifest,
            pixels,
        }
    }

    /// Writes every image plus the manifest into `dir` (created if needed).
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let size = self.image_size();
        for (entry, px) in self.manifest.samples.iter().zip(&self.pixels) {
            std::fs::write(dir.join(&entry.file), pgm::encode(size, size, px))?;
        }
        let mut json = serde_json::to_string_pretty(&self.manifest)?;
        json.push('\n');
        std::fs::write(dir.join(MANIFEST_FILE), json)?;
        Ok(())
    }

    /// Loads a corpus written by [`Corpus::write`], checking every file.
    pub fn load(dir: &Path) -> Result<Corpus> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::load(path.display().to_string(), e.to_string()))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::load(path.display().to_string(), e.to_string()))?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::load(
                path.display().to_string(),
                format!("manifest version {} (expected {MANIFEST_VERSION})", manifest.version),
            ));
        }
        let size = manifest.config.image_size;
        let (n_styles, n_chars) = (manifest.styles.len(), manifest.characters.len());
        if manifest.samples.len() != n_styles * n_chars {
            return Err(Error::load(path.display().to_string(), "sample table does not cover styles × characters"));
        }
        let mut pixels = Vec::with_capacity(manifest.samples.len());
        for (i, entry) in manifest.samples.iter().enumerate() {
            if entry.style_id != i / n_chars || entry.char_id != i % n_chars {
                return Err(Error::load(path.display().to_string(), format!("sample row {i} out of order")));
            }
            let (w, h, px) = pgm::read(&dir.join(&entry.file))?;
            if (w, h) != (size, size) {
                return Err(Error::load(entry.file.clone(), format!("expected {size}×{size}, found {w}×{h}")));
            }
            pixels.push(px);
        }
        Ok(Corpus::from_parts(manifest, pixels))
    }

    pub fn image_size(&self) -> usize {
        self.manifest.config.image_size
    }

    pub fn num_styles(&self) -> usize {
        self.manifest.styles.len()
    }

    pub fn num_chars(&self) -> usize {
        self.manifest.characters.len()
    }

    pub fn num_components(&self) -> usize {
        self.manifest.components.len()
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn sample_index(&self, style_id: usize, char_id: usize) -> usize {
        style_id * self.num_chars() + char_id
    }

    pub fn pixels(&self, sample: usize) -> &[u8] {
        &self.pixels[sample]
    }

    /// Sorted component ids of a character.
    pub fn components_of(&self, char_id: usize) -> &[usize] {
        &self.manifest.characters[char_id].components
    }

    pub fn splits(&self) -> &Splits {
        &self.manifest.splits
    }

    /// Dense label of a training style (for the style classifier and D).
    pub fn train_style_label(&self, style_id: usize) -> Option<usize> {
        self.train_style_index.get(&style_id).copied()
    }

    pub fn train_char_label(&self, char_id: usize) -> Option<usize> {
        self.train_char_index.get(&char_id).copied()
    }

    /// Stacks samples into a `[B, 1, H, W]` tensor normalised to [0, 1].
    pub fn images(&self, samples: &[usize]) -> Tensor<f32> {
        let size = self.image_size();
        let mut data = Vec::with_capacity(samples.len() * size * size);
        for &s in samples {
            data.extend(self.pixels[s].iter().map(|&v| v as f32 / 255.0));
        }
        Tensor::new(vec![samples.len(), 1, size, size], data).expect("consistent image sizes")
    }

    /// SHA-256 over the manifest and every raster, as lowercase hex.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.manifest).expect("manifest serialises"));
        for p in &self.pixels {
            h.update(p);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Generates a corpus and writes it into `dir`.
pub fn build_corpus(cfg: &CorpusConfig, dir: &Path) -> Result<Corpus> {
    let corpus = Corpus::build(cfg)?;
    corpus.write(dir)?;
    Ok(corpus)
}
