//! One function per subcommand.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use lexpert_core::allocation::{parse_matrix, solvers};
use lexpert_core::corpus::{build_corpus, pgm, Corpus, CorpusConfig};
use lexpert_core::eval::{cam_variance, evaluate, ClassifierConfig, EvalConfig, EvalSuite, ReferenceSet, Split};
use lexpert_core::trainer::{load_model, profile_config, profiles, train_or_resume, Trainer, TrainConfig};
use lexpert_core::{Error, Result, Tensor};
use serde_json::json;

use crate::manifest::{code_version, now, RunManifest};
use crate::{AllocArgs, CamArgs, EvalArgs, GenDataArgs, GenerateArgs, TrainArgs};

/// Short machine-readable class of an error, printed before its message.
pub fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Shape { .. } => "shape",
        Error::Contract(_) => "contract",
        Error::Config(_) => "config",
        Error::Load { .. } => "load",
        Error::NonFinite(_) => "non-finite",
        Error::Unknown { .. } => "unknown-name",
        Error::Io(_) => "io",
        Error::Json(_) => "json",
    }
}

fn corpus_dir(arg: Option<PathBuf>, root: &Path) -> PathBuf {
    arg.unwrap_or_else(|| root.join("data"))
}

pub fn gen_data(a: GenDataArgs, root: &Path) -> Result<()> {
    let out = a.out.unwrap_or_else(|| root.join("data"));
    let cfg = CorpusConfig {
        components: a.components,
        styles: a.styles,
        chars: a.chars,
        seed: a.seed,
        image_size: a.size,
        reserved_components: a.reserved,
        ..CorpusConfig::default()
    };
    let corpus = build_corpus(&cfg, &out)?;
    let sp = corpus.splits();
    println!(
        "wrote {} glyphs to {} (styles {}+{} held out, characters {}+{} held out+{} transfer)",
        corpus.len(),
        out.display(),
        sp.train_styles.len(),
        sp.heldout_styles.len(),
        sp.train_chars.len(),
        sp.heldout_chars.len(),
        sp.transfer_chars.len()
    );
    Ok(())
}

/// Recursively overlays `top` onto `base`.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (key, value) in top {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

fn resolve_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = profile_config(a.profile.as_deref().unwrap_or("desk"))?;
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path).map_err(|e| Error::load(path.display().to_string(), e.to_string()))?;
        let file: toml::Table = toml::from_str(&text).map_err(|e| Error::config(e.to_string()))?;
        let mut table: toml::Table = toml::from_str(&cfg.to_toml()).map_err(|e| Error::config(e.to_string()))?;
        merge(&mut table, file);
        cfg = TrainConfig::from_toml(&toml::to_string(&table).map_err(|e| Error::config(e.to_string()))?)?;
    }
    if let Some(steps) = a.steps {
        cfg.total_iterations = steps;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn train(a: TrainArgs, root: &Path) -> Result<()> {
    if a.list_profiles {
        let reg = profiles();
        for name in reg.names() {
            println!("{name}\t{}", reg.get(name)?.describe());
        }
        return Ok(());
    }
    let cfg = resolve_config(&a)?;
    if a.dump_config {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let corpus_path = corpus_dir(a.corpus, root);
    let corpus = Arc::new(Corpus::load(&corpus_path)?);
    let out = a.out.unwrap_or_else(|| root.join("run"));
    let started = now();
    let (trainer, outcome) = train_or_resume(&cfg, Arc::clone(&corpus), &out)?;
    let mut checkpoints: Vec<PathBuf> = fs::read_dir(&out)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
        .collect();
    checkpoints.sort();
    let manifest = RunManifest {
        config: trainer.cfg.clone(),
        corpus: corpus_path,
        corpus_hash: corpus.content_hash(),
        code_version: code_version(),
        seed: cfg.seed,
        started,
        finished: Some(now()),
        checkpoints,
    };
    let path = manifest.write(&out)?;
    match (outcome.last, outcome.probes.last()) {
        (Some(r), probe) => println!(
            "trained to step {}: L_D {:.4} L_G {:.4} L_exp {:.4}{}; manifest {}",
            trainer.step_count(),
            r.loss_d,
            r.loss_g,
            r.loss_exp,
            probe.map_or(String::new(), |p| format!(", held-out recon L1 {:.4}", p.heldout_recon_l1)),
            path.display()
        ),
        (None, _) => println!("{} already complete at step {}", out.display(), trainer.step_count()),
    }
    Ok(())
}

/// `(file name, [1, 1, H, W] glyph)` for every `.pgm` in `dir`, by name.
fn read_glyphs(dir: &Path, size: usize) -> Result<Vec<(String, Tensor<f32>)>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::load(dir.display().to_string(), e.to_string()))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pgm"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::load(dir.display().to_string(), "no .pgm glyphs found"));
    }
    files
        .iter()
        .map(|path| {
            let (w, h, px) = pgm::read(path)?;
            if (w, h) != (size, size) {
                return Err(Error::contract(format!(
                    "{} is {w}×{h}; the model expects {size}×{size}",
                    path.display()
                )));
            }
            let data = px.iter().map(|&v| v as f32 / 255.0).collect();
            let name = path.file_name().unwrap().to_string_lossy().into_owned();
            Ok((name, Tensor::new(vec![1, 1, size, size], data)?))
        })
        .collect()
}

/// `(style, character)` of a corpus file name `<style>_<char>.pgm`.
fn parse_sample_name(name: &str) -> Option<(usize, usize)> {
    let (s, c) = name.strip_suffix(".pgm")?.split_once('_')?;
    Some((s.parse().ok()?, c.parse().ok()?))
}

pub fn generate(a: GenerateArgs, root: &Path) -> Result<()> {
    let model = load_model(&a.ckpt)?;
    let size = model.cfg.image_size;
    let refs = read_glyphs(&a.refs, size)?;
    // corpus-named references carry their style; anything else is taken to
    // be a single user-supplied style
    let labelled = refs.iter().all(|(n, _)| parse_sample_name(n).is_some());
    let set = ReferenceSet::new(
        refs.into_iter()
            .map(|(n, t)| {
                let style = if labelled { parse_sample_name(&n).unwrap().0 } else { 0 };
                (n, style, t)
            })
            .collect(),
    )?;
    let sources = read_glyphs(&a.sources, size)?;
    let stacked = Tensor::concat_rows(&sources.iter().map(|(_, t)| t.clone()).collect::<Vec<_>>())?;
    let images = set.generate(&model, &stacked)?;
    let out = a.out.unwrap_or_else(|| root.join("generated"));
    fs::create_dir_all(&out)?;
    let per = size * size;
    let mut outputs = Vec::new();
    for (i, (name, _)) in sources.iter().enumerate() {
        pgm::write(&out.join(name), size, size, &pgm::quantize(&images.data()[i * per..(i + 1) * per]))?;
        outputs.push(json!({
            "file": name,
            "source": a.sources.join(name),
            "style_id": labelled.then_some(set.style_id),
            "char_id": parse_sample_name(name).map(|(_, c)| c),
        }));
    }
    let manifest = json!({
        "checkpoint": a.ckpt,
        "references": set.files(),
        "outputs": outputs,
    });
    fs::write(out.join("generated.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    println!("wrote {} glyphs to {}", sources.len(), out.display());
    Ok(())
}

pub fn eval(a: EvalArgs, root: &Path) -> Result<()> {
    let split: Split = a.split.parse()?;
    let corpus = Arc::new(Corpus::load(&corpus_dir(a.corpus, root))?);
    // restoring checks that the checkpoint was trained on this corpus
    let model = Trainer::restore(&a.ckpt, Arc::clone(&corpus))?.model;
    let mut classifier = ClassifierConfig {
        seed: a.seed,
        ..ClassifierConfig::default()
    };
    if let Some(e) = a.classifier_epochs {
        classifier.epochs = e;
    }
    let cfg = EvalConfig {
        runs: a.runs,
        refs: a.refs,
        seed: a.seed,
        classifier,
    };
    let suite = EvalSuite::train(&corpus, &cfg.classifier)?;
    let report = evaluate(&model, &corpus, &suite, split, &cfg)?;
    let csv = format!("{}\n{}\n", lexpert_core::eval::EvalReport::CSV_HEADER, report.csv_row());
    print!("{csv}");
    if let Some(path) = a.out {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(&path, &csv)?;
        let record = json!({
            "checkpoint": a.ckpt,
            "run_manifest": RunManifest::beside(&a.ckpt),
            "eval_config": cfg,
            "report": report,
        });
        fs::write(path.with_extension("json"), serde_json::to_string_pretty(&record)? + "\n")?;
    }
    Ok(())
}

pub fn cam(a: CamArgs, root: &Path) -> Result<()> {
    let solver = solvers().get(&a.solver)?;
    let corpus = Corpus::load(&corpus_dir(a.corpus, root))?;
    let model = Trainer::restore(&a.ckpt, Arc::new(corpus.clone()))?.model;
    let sp = corpus.splits();
    // character-major over training styles so small counts still vary content
    let samples: Vec<usize> = sp
        .heldout_chars
        .iter()
        .chain(&sp.train_chars)
        .flat_map(|&c| sp.train_styles.iter().map(move |&s| (s, c)))
        .take(a.samples)
        .map(|(s, c)| corpus.sample_index(s, c))
        .collect();
    let maps = cam_variance(&model, &corpus, &samples, solver.as_ref())?;
    let out = a.out.unwrap_or_else(|| root.join("cam"));
    fs::create_dir_all(&out)?;
    let size = model.cfg.image_size;
    for (i, map) in maps.iter().enumerate() {
        let peak = lexpert_core::eval::argmax(map);
        pgm::write(&out.join(format!("expert_{i}.pgm")), size, size, &pgm::quantize(map))?;
        println!("expert {i}: peak variance at (row {}, col {})", peak / size, peak % size);
    }
    Ok(())
}

pub fn alloc(a: AllocArgs) -> Result<()> {
    let solver = solvers().get(&a.solver)?;
    let text = fs::read_to_string(&a.matrix).map_err(|e| Error::load(a.matrix.display().to_string(), e.to_string()))?;
    let p = parse_matrix(&text)?;
    let result = solver.solve(&p)?;
    print!("{}", result.render());
    println!("objective {:.6}", result.objective);
    Ok(())
}
