//! Black-box checks of the binary: exit codes, report envelopes, and the
//! pipeline's replay determinism.

use std::path::Path;
use std::process::{Command, Output};

fn fairtune(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fairtune"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> serde_json::Value {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn write_corpus(dir: &Path) -> std::path::PathBuf {
    let lines: Vec<String> = (0..30)
        .map(|i| {
            let (pro, occ) = if i % 3 == 0 {
                ("She", "nurse")
            } else {
                ("He", "doctor")
            };
            format!("{pro} works as a {occ} .")
        })
        .collect();
    let path = dir.join("corpus.txt");
    std::fs::write(&path, lines.join("\n") + "\n").unwrap();
    path
}

#[test]
fn usage_errors_exit_one() {
    let out = fairtune(&["no-such-subcommand"]);
    assert_eq!(out.status.code(), Some(1));
    let out = fairtune(&["train", "--corpus", "x.txt", "--method", "warp"]);
    assert_eq!(out.status.code(), Some(2), "missing file reported first");
    let out = fairtune(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn data_errors_exit_two() {
    let out = fairtune(&["augment", "--input", "/definitely/not/here.txt"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn params_prints_counts() {
    let out = fairtune(&[
        "params", "--method", "prefix", "--l", "16", "--d", "768", "--layers", "12",
    ]);
    assert!(out.status.success());
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "294912");

    let out = fairtune(&["params"]);
    let text = String::from_utf8_lossy(&out.stdout);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines.iter().any(|l| *l == "prompt\t12288"));
    assert!(lines.iter().any(|l| *l == "adapter\t304320"));
}

#[test]
fn augment_reports_every_sentence() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_corpus(dir.path());
    let out_path = dir.path().join("aug.jsonl");
    let out = fairtune(&[
        "augment",
        "--input",
        corpus.to_str().unwrap(),
        "--samples",
        "1",
        "--exclude-fixed-identity",
        "--output",
        out_path.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let body = std::fs::read_to_string(&out_path).unwrap();
    let rows: Vec<serde_json::Value> = body
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    // One original plus one guaranteed swap per attribute-bearing sentence.
    assert_eq!(rows.len(), 60);
    for pair in rows.chunks(2) {
        assert_eq!(pair[0]["is_original"], true);
        assert_eq!(pair[1]["is_original"], false);
        assert_eq!(pair[0]["origin"], pair[1]["origin"]);
        assert_ne!(pair[0]["text"], pair[1]["text"]);
        assert!(pair[0]["permutation"].is_null());
        assert_eq!(pair[0]["occurred"], pair[1]["occurred"]);
        assert_ne!(pair[1]["permutation"], pair[1]["occurred"]);
    }
}

#[test]
fn train_and_eval_share_an_envelope() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_corpus(dir.path());
    let out_dir = dir.path().join("run");
    let out = fairtune(&[
        "train",
        "--corpus",
        corpus.to_str().unwrap(),
        "--method",
        "adapter",
        "--r",
        "8",
        "--epochs",
        "1",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    let report = stdout_json(&out);
    assert!(report["config_hash"].as_str().unwrap().len() == 64);
    let fingerprint = report["core_fingerprint"].as_str().unwrap().to_string();
    assert!(report["report"]["final_val_loss"].as_f64().unwrap() > 0.0);
    assert_eq!(report["report"]["tunable_parameters"], 584);

    let out = fairtune(&[
        "eval-lm",
        "--core",
        out_dir.join("core.bin").to_str().unwrap(),
        "--overlay",
        out_dir.join("overlay.bin").to_str().unwrap(),
        "--tokenizer",
        out_dir.join("tokenizer.json").to_str().unwrap(),
        "--corpus",
        corpus.to_str().unwrap(),
    ]);
    let eval = stdout_json(&out);
    assert_eq!(eval["core_fingerprint"].as_str().unwrap(), fingerprint);
    assert!(eval["report"]["stereotype_score"].is_null());
    assert!(eval["report"]["perplexity"].as_f64().unwrap() > 1.0);
    assert_eq!(eval["report"]["indicators"].as_array().unwrap().len(), 30);
}

#[test]
fn eval_bias_needs_exactly_one_benchmark() {
    let out = fairtune(&[
        "eval-bias",
        "--core", "c.bin",
        "--tokenizer", "t.json",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--pairs or --triples"));
}

#[test]
fn pipeline_replays_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let args = |out: &Path| {
        vec![
            "pipeline".to_string(),
            "--pretrain-epochs".into(),
            "2".into(),
            "--epochs".into(),
            "2".into(),
            "--resamples".into(),
            "200".into(),
            "--out".into(),
            out.display().to_string(),
        ]
    };
    let run_a = dir.path().join("a");
    let run_b = dir.path().join("b");
    for out_dir in [&run_a, &run_b] {
        let argv = args(out_dir);
        let argv: Vec<&str> = argv.iter().map(String::as_str).collect();
        let out = fairtune(&argv);
        assert!(
            out.status.success(),
            "stderr: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_a.join("manifest.json")).unwrap())
            .unwrap();

    // Every artifact replays byte for byte.
    for (_, name) in manifest["artifacts"].as_object().unwrap() {
        let name = name.as_str().unwrap();
        let a = std::fs::read(run_a.join(name)).unwrap();
        let b = std::fs::read(run_b.join(name)).unwrap();
        assert_eq!(a, b, "artifact {name} differs between replays");
    }

    // The manifest matches too, once the timestamp field is dropped.
    let strip = |path: &Path| -> String {
        std::fs::read_to_string(path)
            .unwrap()
            .lines()
            .filter(|l| !l.contains("created_at_unix_seconds"))
            .collect::<Vec<_>>()
            .join("\n")
    };
    assert_eq!(
        strip(&run_a.join("manifest.json")),
        strip(&run_b.join("manifest.json"))
    );

    // Stats stay tied to the modules they came from.
    let stats = &manifest["stats"];
    assert_eq!(stats["raw_sentences"], 200);
    assert_eq!(stats["augmented_examples"], 400);
    assert_eq!(stats["downsampled_examples"], 80);
    assert_eq!(stats["train_examples"], 76);
    assert_eq!(stats["val_examples"], 4);
    let score = stats["baseline_stereotype_score"].as_f64().unwrap();
    assert!((0.0..=100.0).contains(&score));
    assert!(stats["val_perplexity"].as_f64().unwrap() > 1.0);
    let p = stats["permutation_p_value"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&p));

    // Reports embed the run's identity.
    let bias: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_a.join("bias_debiased.json")).unwrap())
            .unwrap();
    assert_eq!(bias["config_hash"], manifest["config_hash"]);
    assert_eq!(bias["core_fingerprint"], manifest["core_fingerprint"]);
}

#[test]
fn pipeline_config_file_merges_under_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, r#"{"epochs": 1, "pretrain_epochs": 1, "resamples": 50}"#).unwrap();
    let out_dir = dir.path().join("out");
    let out = fairtune(&[
        "pipeline",
        "--config",
        cfg.to_str().unwrap(),
        "--epochs",
        "2",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["config"]["epochs"], 2, "flag overrides the file");
    assert_eq!(manifest["config"]["pretrain_epochs"], 1);

    std::fs::write(&cfg, r#"{"no_such_field": true}"#).unwrap();
    let bad_dir = dir.path().join("bad");
    let out = fairtune(&[
        "pipeline",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        bad_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}
