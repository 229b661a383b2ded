use std::path::Path;
use std::process::{Command, Output};

fn lexpert(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lexpert"))
        .args(args)
        .env("LEXPERT_OUT_ROOT", root)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

#[test]
fn help_on_every_subcommand_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    for sub in ["gen-data", "train", "generate", "eval", "cam", "alloc"] {
        let out = lexpert(dir.path(), &[sub, "--help"]);
        assert_eq!(out.status.code(), Some(0), "{sub}");
        assert!(text(&out.stdout).contains("Usage"), "{sub}");
    }
    assert_eq!(lexpert(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn usage_errors_exit_two_and_name_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    let out = lexpert(dir.path(), &["eval", "--split", "indomain"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("--ckpt"), "{}", text(&out.stderr));
    let out = lexpert(dir.path(), &["alloc", "--matrix", "m.txt", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("--bogus"));
    assert_eq!(lexpert(dir.path(), &["frobnicate"]).status.code(), Some(2));
    let out = lexpert(dir.path(), &["eval", "--ckpt", "x", "--split", "cross"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_files_exit_one_with_a_single_line_error() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["alloc", "--matrix", "nope.txt"][..],
        &["train", "--config", "nope.toml", "--dump-config"][..],
        &["eval", "--ckpt", "nope.ckpt", "--split", "indomain"][..],
        &["generate", "--ckpt", "nope.ckpt", "--refs", "r", "--sources", "s"][..],
    ] {
        let out = lexpert(dir.path(), args);
        assert_eq!(out.status.code(), Some(1), "{args:?}");
        let err = text(&out.stderr);
        let line = err.lines().last().unwrap();
        assert!(line.starts_with("error: load: ") || line.starts_with("error: io: "), "{err}");
    }
}

#[test]
fn alloc_prints_the_optimal_assignment() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("m.txt");
    std::fs::write(&m, "0.9 0.1 0.3\n0.2 0.8 0.4\n").unwrap();
    let out = lexpert(dir.path(), &["alloc", "--matrix", m.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let s = text(&out.stdout);
    // each expert takes its best column; the third goes to the larger 0.4
    assert!(s.starts_with("1 0 0\n0 1 1\n"), "{s}");
    assert!(s.contains("objective 2.100000"), "{s}");
    let brute = lexpert(dir.path(), &["alloc", "--matrix", m.to_str().unwrap(), "--solver", "brute-force"]);
    assert_eq!(text(&brute.stdout), s);
    let bad = lexpert(dir.path(), &["alloc", "--matrix", m.to_str().unwrap(), "--solver", "greedy"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(text(&bad.stderr).contains("brute-force"));
}

#[test]
fn dump_config_round_trips_and_applies_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let out = lexpert(dir.path(), &["train", "--profile", "korean", "--steps", "7", "--dump-config"]);
    assert_eq!(out.status.code(), Some(0));
    let dumped = text(&out.stdout);
    let cfg = lexpert_core::trainer::TrainConfig::from_toml(&dumped).unwrap();
    assert_eq!((cfg.model.k, cfg.total_iterations), (3, 7));
    let file = dir.path().join("c.toml");
    std::fs::write(&file, "seed = 9\n[weights]\nrecon = 0.5\n").unwrap();
    let out = lexpert(dir.path(), &["train", "--config", file.to_str().unwrap(), "--dump-config"]);
    let cfg = lexpert_core::trainer::TrainConfig::from_toml(&text(&out.stdout)).unwrap();
    assert_eq!((cfg.seed, cfg.weights.recon, cfg.model.k), (9, 0.5, 6));
    std::fs::write(&file, "bogus = 1\n").unwrap();
    let out = lexpert(dir.path(), &["train", "--config", file.to_str().unwrap(), "--dump-config"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).starts_with("error: config: "));
}

const TINY: &str = r#"
n = 2
targets_per_step = 2
[model]
k = 3
d = 4
stem_channels = [4, 4]
head_blocks = 1
classifier_blocks = 1
gen_channels = [8, 4, 4]
disc_channels = [4, 8]
"#;

#[test]
fn pipeline_from_data_to_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let run = |args: &[&str]| {
        let out = lexpert(root, args);
        assert_eq!(out.status.code(), Some(0), "{args:?}: {}", text(&out.stderr));
        text(&out.stdout)
    };
    // outputs default to the environment-provided root
    run(&["gen-data", "--styles", "8", "--chars", "60"]);
    assert!(root.join("data/manifest.json").exists());

    let cfg = root.join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let cfg = cfg.to_str().unwrap();
    run(&["train", "--profile", "smoke", "--config", cfg]);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(root.join("run/run.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["total_iterations"], 4);
    assert!(manifest["corpus_hash"].as_str().unwrap().len() == 64);
    assert!(manifest["checkpoints"].as_array().unwrap().iter().any(|p| p.as_str().unwrap().ends_with("last.ckpt")));
    // a second invocation finds the run complete
    assert!(run(&["train", "--profile", "smoke", "--config", cfg]).contains("already complete"));

    let ckpt = root.join("run/last.ckpt");
    let ckpt = ckpt.to_str().unwrap();
    // references: three glyphs of style 2; sources: two glyphs of style 0
    let (refs, srcs) = (root.join("refs"), root.join("srcs"));
    std::fs::create_dir_all(&refs).unwrap();
    std::fs::create_dir_all(&srcs).unwrap();
    for c in [0, 1, 2] {
        std::fs::copy(root.join(format!("data/2_{c}.pgm")), refs.join(format!("2_{c}.pgm"))).unwrap();
    }
    for c in [5, 6] {
        std::fs::copy(root.join(format!("data/0_{c}.pgm")), srcs.join(format!("0_{c}.pgm"))).unwrap();
    }
    let gen = |out: &str| {
        run(&[
            "generate", "--ckpt", ckpt, "--refs", refs.to_str().unwrap(), "--sources", srcs.to_str().unwrap(), "--out",
            root.join(out).to_str().unwrap(),
        ])
    };
    gen("g1");
    gen("g2");
    for f in ["0_5.pgm", "0_6.pgm", "generated.json"] {
        let a = std::fs::read(root.join("g1").join(f)).unwrap();
        assert_eq!(a, std::fs::read(root.join("g2").join(f)).unwrap(), "{f}");
    }
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(root.join("g1/generated.json")).unwrap()).unwrap();
    assert_eq!(meta["outputs"][1]["char_id"], 6);
    assert_eq!(meta["outputs"][0]["style_id"], 2);

    let csv_path = root.join("eval/indomain.csv");
    let stdout = run(&[
        "eval", "--ckpt", ckpt, "--split", "indomain", "--runs", "2", "--classifier-epochs", "1", "--out",
        csv_path.to_str().unwrap(),
    ]);
    assert!(stdout.starts_with("split,runs,acc_s,acc_c,acc_b,fid_s,fid_c,fid_h\nindomain,2,"), "{stdout}");
    assert_eq!(std::fs::read_to_string(&csv_path).unwrap(), stdout);
    let record: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(csv_path.with_extension("json")).unwrap()).unwrap();
    assert!(record["run_manifest"].as_str().unwrap().ends_with("run.json"));
    run(&["eval", "--ckpt", ckpt, "--split", "transfer", "--runs", "1", "--classifier-epochs", "1"]);

    let cam = run(&["cam", "--ckpt", ckpt, "--samples", "16"]);
    assert_eq!(cam.lines().count(), 3);
    for i in 0..3 {
        let (w, h, _) = lexpert_core::corpus::pgm::read(&root.join(format!("cam/expert_{i}.pgm"))).unwrap();
        assert_eq!((w, h), (32, 32));
    }
}
