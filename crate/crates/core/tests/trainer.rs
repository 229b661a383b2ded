use std::collections::HashMap;
use std::sync::Arc;

use lexpert_core::corpus::{Corpus, CorpusConfig};
use lexpert_core::fewshot::generate_grouped;
use lexpert_core::losses::LossToggles;
use lexpert_core::network::ModelConfig;
use lexpert_core::trainer::{profile_config, profiles, run, RunPaths, Trainer, TrainConfig};
use lexpert_core::{Error, Tensor};

fn corpus() -> Arc<Corpus> {
    Arc::new(
        Corpus::build(&CorpusConfig {
            styles: 6,
            chars: 40,
            ..CorpusConfig::default()
        })
        .unwrap(),
    )
}

fn tiny() -> TrainConfig {
    TrainConfig {
        n: 2,
        targets_per_step: 2,
        model: ModelConfig {
            k: 2,
            d: 4,
            stem_channels: [4, 4],
            head_blocks: 1,
            classifier_blocks: 1,
            gen_channels: [8, 4, 4],
            disc_channels: vec![4, 8, 8],
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn all_off() -> LossToggles {
    LossToggles {
        adversarial: false,
        feature_matching: false,
        reconstruction: false,
        classification: false,
        entropy: false,
        style_content_indp: false,
        inter_expert_indp: false,
    }
}

fn snapshot(tr: &Trainer) -> HashMap<String, Tensor<f32>> {
    tr.model.params.entries().map(|(n, t)| (n.to_string(), t.clone())).collect()
}

fn changed(before: &HashMap<String, Tensor<f32>>, tr: &Trainer) -> Vec<String> {
    let mut out: Vec<String> = tr
        .model
        .params
        .entries()
        .filter(|(n, t)| before[*n] != **t)
        .map(|(n, _)| n.to_string())
        .collect();
    out.sort();
    out
}

#[test]
fn reconstruction_only_leaves_discriminator_and_classifiers_alone() {
    let cfg = TrainConfig {
        toggles: LossToggles {
            reconstruction: true,
            ..all_off()
        },
        ..tiny()
    };
    let mut tr = Trainer::new(cfg, corpus()).unwrap();
    let before = snapshot(&tr);
    let report = tr.step().unwrap();
    assert!(report.l_recon > 0.0 && report.loss_d == 0.0 && report.loss_exp == 0.0);
    let moved = changed(&before, &tr);
    assert!(moved.iter().all(|n| !n.starts_with("disc.") && !n.starts_with("cls.")), "{moved:?}");
    assert!(moved.iter().any(|n| n.starts_with("gen.")));
    assert!(moved.iter().any(|n| n.starts_with("enc.")));
}

#[test]
fn parameter_groups_receive_only_their_own_gradients() {
    let mut tr = Trainer::new(tiny(), corpus()).unwrap();
    let batch = tr.sample().unwrap();
    let (_, grads) = tr.train_step(&batch).unwrap();
    assert!(!grads.discriminator.is_empty() && !grads.generator.is_empty() && !grads.experts.is_empty());
    assert!(grads.discriminator.keys().all(|n| n.starts_with("disc.")));
    for n in grads.generator.keys() {
        assert!(n.starts_with("enc.") || n.starts_with("proj.") || n.starts_with("gen."), "{n}");
    }
    for n in grads.experts.keys() {
        assert!(n.starts_with("enc.") || n.starts_with("proj.") || n.starts_with("cls."), "{n}");
    }
    assert!(grads.experts.keys().any(|n| n.starts_with("cls.")));
}

#[test]
fn entropy_terms_give_classifiers_exactly_zero_gradient() {
    let cfg = TrainConfig {
        toggles: LossToggles {
            entropy: true,
            ..all_off()
        },
        ..tiny()
    };
    let mut tr = Trainer::new(cfg, corpus()).unwrap();
    let batch = tr.sample().unwrap();
    let before = snapshot(&tr);
    let (report, grads) = tr.train_step(&batch).unwrap();
    assert!(report.entropy_style_feat.iter().all(|&h| h > 0.0));
    for (n, g) in &grads.experts {
        if n.starts_with("cls.") {
            assert!(g.data().iter().all(|&x| x == 0.0), "{n}");
        }
    }
    // the encoder does move, and the classifiers do not
    assert!(grads.experts.iter().any(|(n, g)| n.starts_with("enc.") && g.data().iter().any(|&x| x != 0.0)));
    let moved = changed(&before, &tr);
    assert!(moved.iter().all(|n| !n.starts_with("cls.") && !n.starts_with("disc.")), "{moved:?}");
}

#[test]
fn expert_gradient_is_the_sum_of_its_terms() {
    let c = corpus();
    let grads_with = |toggles: LossToggles| {
        let mut tr = Trainer::new(TrainConfig { toggles, ..tiny() }, Arc::clone(&c)).unwrap();
        let batch = tr.sample().unwrap();
        let (report, grads) = tr.train_step(&batch).unwrap();
        (report, grads.experts)
    };
    let full = LossToggles {
        classification: true,
        entropy: true,
        style_content_indp: true,
        inter_expert_indp: true,
        ..all_off()
    };
    let (report, total) = grads_with(full);
    let parts = [
        LossToggles { classification: true, ..all_off() },
        LossToggles { entropy: true, ..all_off() },
        LossToggles { style_content_indp: true, ..all_off() },
        LossToggles { inter_expert_indp: true, ..all_off() },
    ];
    let mut sum: HashMap<String, Vec<f64>> = HashMap::new();
    let mut part_total = 0.0;
    for t in parts {
        let (r, g) = grads_with(t);
        part_total += r.loss_exp;
        for (n, v) in g {
            let acc = sum.entry(n).or_insert_with(|| vec![0.0; v.numel()]);
            for (a, &x) in acc.iter_mut().zip(v.data()) {
                *a += x as f64;
            }
        }
    }
    assert!((report.loss_exp - part_total).abs() < 1e-5 * report.loss_exp.abs().max(1.0));
    assert!((report.loss_exp - report.expert_sum()).abs() < 1e-12);
    for (n, g) in &total {
        let s = &sum[n];
        let scale = g.data().iter().map(|x| x.abs() as f64).fold(1e-6, f64::max);
        for (&a, &b) in g.data().iter().zip(s) {
            assert!((a as f64 - b).abs() <= 1e-4 * scale, "{n}: {a} vs {b}");
        }
    }
}

#[test]
fn same_seed_gives_identical_metric_streams() {
    let c = corpus();
    let stream = || {
        let mut tr = Trainer::new(tiny(), Arc::clone(&c)).unwrap();
        (0..3).map(|_| tr.step().unwrap().to_json_line()).collect::<Vec<_>>()
    };
    assert_eq!(stream(), stream());
    let mut other = Trainer::new(TrainConfig { seed: 2, ..tiny() }, Arc::clone(&c)).unwrap();
    assert_ne!(other.step().unwrap().to_json_line(), stream()[0]);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let c = corpus();
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        checkpoint_every: 0,
        probe_every: 0,
        ..tiny()
    };

    let mut straight = Trainer::new(cfg.clone(), Arc::clone(&c)).unwrap();
    let a = RunPaths::new(dir.path().join("a"));
    run(&mut straight, 4, &a, None).unwrap();

    let b = RunPaths::new(dir.path().join("b"));
    let mut first = Trainer::new(cfg, Arc::clone(&c)).unwrap();
    run(&mut first, 2, &b, None).unwrap();
    drop(first);
    let mut resumed = Trainer::restore(&b.last_checkpoint(), Arc::clone(&c)).unwrap();
    assert_eq!(resumed.step_count(), 2);
    run(&mut resumed, 4, &b, None).unwrap();

    let metrics_a = std::fs::read_to_string(a.metrics()).unwrap();
    let metrics_b = std::fs::read_to_string(b.metrics()).unwrap();
    assert_eq!(metrics_a.lines().count(), 4);
    assert_eq!(metrics_a, metrics_b);
    assert_eq!(snapshot(&straight), snapshot(&resumed));
}

#[test]
fn checkpoint_round_trip_reproduces_generation() {
    let c = corpus();
    let dir = tempfile::tempdir().unwrap();
    let tr = Trainer::new(tiny(), Arc::clone(&c)).unwrap();
    let path = dir.path().join("init.ckpt");
    tr.save(&path).unwrap();
    let back = Trainer::restore(&path, Arc::clone(&c)).unwrap();
    let images = c.images(&[0, 1, 2, 3]);
    let groups = vec![vec![0, 1], vec![2]];
    let content = vec![vec![2, 3], vec![0]];
    let x = generate_grouped(&tr.model, &images, &groups, &content).unwrap();
    let y = generate_grouped(&back.model, &images, &groups, &content).unwrap();
    assert_eq!(x, y);
    let model = lexpert_core::trainer::load_model(&path).unwrap();
    assert_eq!(generate_grouped(&model, &images, &groups, &content).unwrap(), x);

    // corrupted header: explicit load error
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] ^= 0xff;
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, &bytes).unwrap();
    assert!(matches!(Trainer::restore(&bad, Arc::clone(&c)), Err(Error::Load { .. })));
    // truncated file
    std::fs::write(&bad, &std::fs::read(&path).unwrap()[..100]).unwrap();
    assert!(matches!(Trainer::restore(&bad, c), Err(Error::Load { .. })));
}

#[test]
fn non_finite_forward_names_the_failing_term() {
    let mut tr = Trainer::new(tiny(), corpus()).unwrap();
    let id = tr.model.params.find("gen.out.b").unwrap();
    tr.model.params.get_mut(id).data_mut()[0] = f32::INFINITY;
    let err = tr.step().unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)));
    assert!(err.to_string().contains("generator"), "{err}");
}

#[test]
fn profiles_and_config_round_trip() {
    let names = profiles().names();
    for want in ["desk", "full", "korean", "smoke", "ablation-full", "ablation-none"] {
        assert!(names.contains(&want), "{want}");
    }
    let korean = profile_config("korean").unwrap();
    assert_eq!(korean.model.k, 3);
    assert!(!korean.toggles.inter_expert_indp);
    let none = profile_config("ablation-none").unwrap();
    assert!(!none.toggles.classification && !none.toggles.entropy && !none.toggles.style_content_indp);
    assert!(none.toggles.adversarial && none.toggles.reconstruction);
    assert!(profile_config("nope").unwrap_err().to_string().contains("available"));

    let cfg = TrainConfig::default();
    assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    assert!(TrainConfig::from_toml("lr_rest = 0.0").is_err());
    assert!(TrainConfig::from_toml("solver = \"greedy\"").is_err());
    assert!(TrainConfig::from_toml("bogus = 1").is_err());
}
