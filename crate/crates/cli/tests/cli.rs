//! End-to-end checks of the `enclab` binary: every subcommand, the
//! exit-code contract, and the artifact layout, all at toy scale.

use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn enclab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_enclab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_success(out: &Output) {
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        stdout(out),
        stderr(out)
    );
}

/// Toy-scale experiment config shared by the pipeline tests.
fn write_tiny_config(dir: &Path, defenses: &str) -> std::path::PathBuf {
    let path = dir.join("config.json");
    let config = format!(
        r#"{{
  "dataset": {{
    "source": "synthetic",
    "n_classes": 2,
    "pretrain_per_class": 12,
    "downstream_per_class": 4,
    "test_per_class": 4,
    "attacker_pool_per_class": 6,
    "image_side": 8
  }},
  "attack": {{ "n_targets": 1, "n_references": 2, "poison_rate": 0.2 }},
  "pretrain": {{
    "epochs": 1,
    "batch_size": 8,
    "arch": {{
      "input_channels": 3,
      "widths": [4, 8],
      "groups": 4,
      "feature_dim": 8,
      "head_width": 8,
      "proj_dim": 4
    }}
  }},
  "downstream": {{ "epochs": 2 }},
  "defenses": {defenses},
  "defense_params": {{ "kmeans_clusters": 5, "kmeans_flagged": 1, "early_stop_epochs": 1 }},
  "n_trials": 1,
  "master_seed": 99
}}"#
    );
    std::fs::write(&path, config).unwrap();
    path
}

#[test]
fn gen_data_writes_a_readable_container() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("data.penc");
    let result = enclab(&[
        "gen-data",
        "--out",
        out.to_str().unwrap(),
        "--classes",
        "2",
        "--per-class",
        "3",
        "--size",
        "8",
        "--seed",
        "1",
    ]);
    assert_success(&result);
    assert!(stdout(&result).contains("6 labeled images"));

    let ds = enclab_core::data::read_container(&out)
        .unwrap()
        .into_labeled()
        .unwrap();
    assert_eq!(ds.images.len(), 6);
    assert_eq!(ds.class_names.len(), 2);

    // Same seed, second file: identical bytes.
    let out2 = dir.path().join("data2.penc");
    assert_success(&enclab(&[
        "gen-data",
        "--out",
        out2.to_str().unwrap(),
        "--classes",
        "2",
        "--per-class",
        "3",
        "--size",
        "8",
        "--seed",
        "1",
    ]));
    assert_eq!(
        std::fs::read(&out).unwrap(),
        std::fs::read(&out2).unwrap()
    );

    // Unlabeled flavor round-trips too.
    let out3 = dir.path().join("pool.penc");
    assert_success(&enclab(&[
        "gen-data",
        "--out",
        out3.to_str().unwrap(),
        "--classes",
        "2",
        "--per-class",
        "3",
        "--size",
        "8",
        "--unlabeled",
    ]));
    enclab_core::data::read_container(&out3)
        .unwrap()
        .into_unlabeled()
        .unwrap();
}

#[test]
fn attack_builds_a_poison_container() {
    let dir = TempDir::new().unwrap();
    let config = write_tiny_config(dir.path(), "[]");
    let out = dir.path().join("poison");
    let result = enclab(&[
        "attack",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_success(&result);
    // budget = round(0.2 * 24) = 5
    assert!(stdout(&result).contains("budget 5"), "{}", stdout(&result));
    assert!(out.join("poison.penc").exists());
    assert!(out.join("poison.json").exists());
}

#[test]
fn pretrain_downstream_evaluate_chain() {
    let dir = TempDir::new().unwrap();
    let config = write_tiny_config(dir.path(), "[]");
    let pool = dir.path().join("pool.penc");
    let labeled = dir.path().join("labeled.penc");
    for (path, extra) in [(&pool, Some("--unlabeled")), (&labeled, None)] {
        let mut args = vec![
            "gen-data",
            "--out",
            path.to_str().unwrap(),
            "--classes",
            "2",
            "--per-class",
            "4",
            "--size",
            "8",
        ];
        if let Some(flag) = extra {
            args.push(flag);
        }
        assert_success(&enclab(&args));
    }

    let encoder = dir.path().join("encoder.penw");
    let result = enclab(&[
        "pretrain",
        "--config",
        config.to_str().unwrap(),
        "--data",
        pool.to_str().unwrap(),
        "--out",
        encoder.to_str().unwrap(),
    ]);
    assert_success(&result);
    assert!(stdout(&result).contains("epoch 0: loss"));
    assert!(encoder.exists());

    let classifier = dir.path().join("clf.json");
    let result = enclab(&[
        "downstream",
        "--config",
        config.to_str().unwrap(),
        "--encoder",
        encoder.to_str().unwrap(),
        "--data",
        labeled.to_str().unwrap(),
        "--out",
        classifier.to_str().unwrap(),
    ]);
    assert_success(&result);
    assert!(stdout(&result).contains("2-class linear classifier"));

    let result = enclab(&[
        "evaluate",
        "--encoder",
        encoder.to_str().unwrap(),
        "--classifier",
        classifier.to_str().unwrap(),
        "--data",
        labeled.to_str().unwrap(),
    ]);
    assert_success(&result);
    let metrics: serde_json::Value = serde_json::from_str(&stdout(&result)).unwrap();
    let acc = metrics["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert_eq!(metrics["per_class_accuracy"].as_array().unwrap().len(), 2);
}

#[test]
fn run_then_report() {
    let dir = TempDir::new().unwrap();
    let config = write_tiny_config(dir.path(), r#"["early_stop"]"#);
    let run_dir = dir.path().join("run");
    let result = enclab(&[
        "run",
        "--config",
        config.to_str().unwrap(),
        "--out",
        run_dir.to_str().unwrap(),
    ]);
    assert_success(&result);
    let text = stdout(&result);
    assert!(text.contains("1 trial(s) complete"), "{text}");
    assert!(text.contains("early_stop_asr"), "{text}");
    assert!(run_dir.join("trials.csv").exists());
    assert!(run_dir.join("summary.csv").exists());
    assert!(run_dir.join("manifest.json").exists());

    let result = enclab(&["report", run_dir.to_str().unwrap()]);
    assert_success(&result);
    let text = stdout(&result);
    assert!(text.contains("1 valid trial report(s)"), "{text}");
    assert!(text.contains("asr"), "{text}");

    // Re-running resumes instead of recomputing.
    let result = enclab(&[
        "run",
        "--config",
        config.to_str().unwrap(),
        "--out",
        run_dir.to_str().unwrap(),
    ]);
    assert_success(&result);
    assert!(stdout(&result).contains("(1 resumed)"), "{}", stdout(&result));
}

#[test]
fn defend_emits_reports_and_flagged_indices() {
    let dir = TempDir::new().unwrap();
    let config = write_tiny_config(dir.path(), r#"["dedup_kmeans"]"#);
    let out = dir.path().join("defense");
    let result = enclab(&[
        "defend",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_success(&result);
    assert!(stdout(&result).contains("dedup_kmeans: ASR"));

    let reports: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("defense_reports.json")).unwrap())
            .unwrap();
    assert!(reports.get("dedup_kmeans").is_some());

    let detection: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("detection.json")).unwrap())
            .unwrap();
    let flagged = detection["flagged_indices"].as_array().unwrap();
    let lines = std::fs::read_to_string(out.join("flagged_indices.txt")).unwrap();
    let listed: Vec<usize> = lines
        .lines()
        .map(|l| l.parse::<usize>().unwrap())
        .collect();
    assert_eq!(listed.len(), flagged.len());
}

#[test]
fn defend_accepts_a_single_defense_override() {
    let dir = TempDir::new().unwrap();
    let config = write_tiny_config(dir.path(), "[]");
    let out = dir.path().join("defense");
    let result = enclab(&[
        "defend",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--defense",
        "early_stop",
    ]);
    assert_success(&result);
    assert!(stdout(&result).contains("early_stop: ASR"));

    // No defenses anywhere → validation failure.
    let result = enclab(&[
        "defend",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(result.status.code(), Some(1));
    assert!(stderr(&result).contains("no defenses"));

    // Unknown defense name → validation failure.
    let result = enclab(&[
        "defend",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--defense",
        "firewall",
    ]);
    assert_eq!(result.status.code(), Some(1));
    assert!(stderr(&result).contains("unknown defense"));
}

#[test]
fn exit_codes_follow_the_contract() {
    let dir = TempDir::new().unwrap();

    // Bad config value → 1, with the offending field named.
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"pretrain": {"temperature": "hot"}}"#).unwrap();
    let result = enclab(&[
        "run",
        "--config",
        bad.to_str().unwrap(),
        "--out",
        dir.path().join("r").to_str().unwrap(),
    ]);
    assert_eq!(result.status.code(), Some(1));
    assert!(stderr(&result).contains("pretrain.temperature"));

    // Invalid value caught by validation → 1.
    std::fs::write(&bad, r#"{"attack": {"poison_rate": 2.0}}"#).unwrap();
    let result = enclab(&["attack", "--config", bad.to_str().unwrap(), "--out", "x"]);
    assert_eq!(result.status.code(), Some(1));

    // Unknown flag → usage error → 1.
    let result = enclab(&["run", "--bogus"]);
    assert_eq!(result.status.code(), Some(1));

    // Corrupt binary input → runtime failure → 2.
    let junk = dir.path().join("junk.penw");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let result = enclab(&[
        "evaluate",
        "--encoder",
        junk.to_str().unwrap(),
        "--classifier",
        junk.to_str().unwrap(),
        "--data",
        junk.to_str().unwrap(),
    ]);
    assert_eq!(result.status.code(), Some(2));

    // --help prints usage and succeeds.
    let result = enclab(&["--help"]);
    assert_eq!(result.status.code(), Some(0));
    assert!(stdout(&result).contains("gen-data"));
}
