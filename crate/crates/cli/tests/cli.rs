mod common;

use std::fs;

use common::{arg, ctran, fixture, validate};
use ctran_core::model::checkpoint;

fn run_config(dir: &std::path::Path, epochs: usize) -> std::path::PathBuf {
    let cfg = serde_json::json!({
        "dataset": "data/train",
        "test_dataset": "data/test",
        "output_dir": "runs/a",
        "model": common::model_config(),
        "train": {"epochs": epochs, "seed": 3},
        "mask": {"seed": 3},
        "eval": {"epsilons": [0.0, 0.5], "seed": 1}
    });
    let path = dir.join("run.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn missing_dataset_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = run_config(dir.path(), 1);
    let out = ctran(&["train", "--config", arg(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains(&dir.path().join("data/train").display().to_string()), "{err}");

    let out = ctran(&["eval", "--checkpoint", "/nonexistent/model.ckpt", "--dataset", "/nonexistent/data"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/model.ckpt"));
}

#[test]
fn train_is_reproducible_and_writes_the_run_directory() {
    let fx = fixture();
    let cfg = run_config(fx.dir.path(), 2);
    let run = |out: &str| {
        let o = ctran(&["train", "--config", arg(&cfg), "--output-dir", out]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        std::path::PathBuf::from(out)
    };
    let a = run(arg(&fx.dir.path().join("runs/a")));
    let b = run(arg(&fx.dir.path().join("runs/b")));
    for f in ["final.ckpt", "best.ckpt", "loss.csv", "config.json", "eval.csv", "eval.json"] {
        assert!(a.join(f).is_file(), "missing {f}");
    }
    assert_eq!(
        checkpoint::file_digest(a.join("final.ckpt")).unwrap(),
        checkpoint::file_digest(b.join("final.ckpt")).unwrap()
    );
    assert_eq!(fs::read(a.join("eval.csv")).unwrap(), fs::read(b.join("eval.csv")).unwrap());
    let snap: serde_json::Value = serde_json::from_slice(&fs::read(a.join("config.json")).unwrap()).unwrap();
    assert_eq!(snap["train"]["epochs"], 2);
    assert_eq!(snap["train"]["lmt_enabled"], true);
    assert_eq!(fs::read_to_string(a.join("eval.csv")).unwrap().lines().count(), 3);
}

#[test]
fn lmt_flag_selects_the_ablation() {
    let fx = fixture();
    let cfg = run_config(fx.dir.path(), 1);
    let out_dir = fx.dir.path().join("runs/nolmt");
    let o = ctran(&["train", "--config", arg(&cfg), "--lmt=false", "--output-dir", arg(&out_dir)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let snap: serde_json::Value = serde_json::from_slice(&fs::read(out_dir.join("config.json")).unwrap()).unwrap();
    assert_eq!(snap["train"]["lmt_enabled"], false);
}

#[test]
fn epsilon_sweep_emits_one_row_per_setting() {
    let fx = fixture();
    let out_dir = fx.dir.path().join("eval");
    let args = [
        "eval",
        "--checkpoint",
        arg(&fx.checkpoint),
        "--dataset",
        arg(&fx.test),
        "--epsilon",
        "0,25,50,75",
        "--seed",
        "4",
        "--output-dir",
        arg(&out_dir),
    ];
    let a = ctran(&args);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    let csv = String::from_utf8(a.stdout.clone()).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 5);
    assert!(lines[0].starts_with("csv_version,mode,epsilon"));
    for (line, eps) in lines[1..].iter().zip(["0", "0.25", "0.5", "0.75"]) {
        assert!(line.starts_with(&format!("1,partial,{eps},")), "{line}");
    }
    assert_eq!(fs::read_to_string(out_dir.join("eval.csv")).unwrap(), csv);
    let b = ctran(&args);
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn known_groups_need_extra_labels() {
    let fx = fixture();
    let o = ctran(&[
        "eval",
        "--checkpoint",
        arg(&fx.checkpoint),
        "--dataset",
        arg(&fx.test),
        "--known-groups",
        "wings",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("protocol error"));
}

fn predict(fx: &common::Fixture, extra: &[&str]) -> serde_json::Value {
    let mut args = vec![
        "predict",
        "--checkpoint",
        arg(&fx.checkpoint),
        "--dataset",
        arg(&fx.test),
        "--sample-id",
        "1510",
    ];
    args.extend_from_slice(extra);
    let o = ctran(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).unwrap()
}

#[test]
fn predict_without_states_is_regular_inference() {
    let fx = fixture();
    let resp = predict(&fx, &[]);
    validate("InterveneResponse", &resp);
    let labels = resp["labels"].as_array().unwrap();
    assert_eq!(labels.len(), 16);
    for (l, b) in labels.iter().zip(resp["baseline"].as_array().unwrap()) {
        assert_eq!(l["state_echo"], "unknown");
        assert_eq!(&l["probability"], b);
    }
}

#[test]
fn predict_echoes_given_states() {
    let fx = fixture();
    let resp = predict(&fx, &["--state", "label_03=positive", "--state", "label_10=negative"]);
    validate("InterveneResponse", &resp);
    let echo: Vec<&str> = resp["labels"]
        .as_array()
        .unwrap()
        .iter()
        .map(|l| l["state_echo"].as_str().unwrap())
        .collect();
    for (i, s) in echo.iter().enumerate() {
        let want = match i {
            3 => "positive",
            10 => "negative",
            _ => "unknown",
        };
        assert_eq!(*s, want, "label {i}");
    }

    let o = ctran(&[
        "predict",
        "--checkpoint",
        arg(&fx.checkpoint),
        "--dataset",
        arg(&fx.test),
        "--sample-id",
        "1510",
        "--state",
        "zebra=positive",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("valid labels: label_00"));
}

#[test]
fn generate_and_export_write_their_files() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = ctran(&["generate-data", "--out", arg(&data), "--num-train", "30", "--num-test", "10", "--seed", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["train/labels.json", "train/manifest.jsonl", "train/features.bin", "test/manifest.jsonl", "synth.json"] {
        assert!(data.join(f).is_file(), "missing {f}");
    }
    assert_eq!(fs::read_to_string(data.join("test/manifest.jsonl")).unwrap().lines().count(), 10);

    let fx = fixture();
    let out = fx.dir.path().join("emb.bin");
    let o = ctran(&["export-embeddings", "--checkpoint", arg(&fx.checkpoint), "--out", arg(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let names = fs::read_to_string(fx.dir.path().join("emb.bin.labels.txt")).unwrap();
    assert_eq!(names.lines().count(), 16);
}

#[test]
fn shipped_demo_configs_parse() {
    let demo = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../demo");
    let cfg = ctran_cli::config::RunConfig::load(&demo.join("train.json")).unwrap();
    cfg.validate().unwrap();
    let spec: ctran_core::data::SynthSpec =
        serde_json::from_str(&fs::read_to_string(demo.join("synth.json")).unwrap()).unwrap();
    spec.validate().unwrap();
    assert_eq!(spec, ctran_core::data::SynthSpec::planted(0));
    assert_eq!(cfg.model.num_labels, spec.num_labels);
    let req: ctran_core::intervene::InterveneRequest =
        serde_json::from_str(&fs::read_to_string(demo.join("request.json")).unwrap()).unwrap();
    validate("InterveneRequest", &serde_json::to_value(&req).unwrap());
}
