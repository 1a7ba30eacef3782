use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cvla(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cvla")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

const TINY: &str = r#"{
  "world": {"image_size": 16},
  "n_samples": 12,
  "splits": {"val": 2, "test": 4},
  "train": {
    "steps": 4, "checkpoint_every": 2, "batch_size": 2, "ddim_steps": 3,
    "schedule": {"t_train": 20},
    "arch": {"channels": [2, 2, 2], "emb_dim": 4, "cond_map_channels": 1}
  },
  "explain": {"ddim_steps": 3}
}"#;

fn write_config(dir: &Path) -> String {
    let path = dir.join("config.json");
    fs::write(&path, TINY).unwrap();
    path.to_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_writes_images_and_manifest_reproducibly() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&cvla(&["synth", "--config", &cfg, "--seed", "5", "--out", s(&a)]));
    ok(&cvla(&["synth", "--config", &cfg, "--seed", "5", "--out", s(&b)]));
    let images = fs::read_dir(a.join("images")).unwrap().count();
    let manifest = fs::read(a.join("manifest.jsonl")).unwrap();
    assert_eq!(images, 12);
    assert_eq!(String::from_utf8_lossy(&manifest).lines().count(), 12);
    assert_eq!(manifest, fs::read(b.join("manifest.jsonl")).unwrap());
    assert!(a.join("run_manifest.json").exists());
    assert!(!a.join(".cvla.lock").exists());
}

#[test]
fn config_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.json");
    fs::write(
        &bad,
        r#"{"world": {"findings": [{"name": "a", "kind": "cardiomegaly"}, {"name": "a", "kind": "effusion"}]}}"#,
    )
    .unwrap();
    let out = cvla(&["synth", "--config", s(&bad), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("config error"));
    let cfg = write_config(tmp.path());
    let out = cvla(&["synth", "--config", &cfg, "--out", s(&tmp.path().join("o")), "--seed", "x"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = cvla(&["evaluate", "--run", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));
    let locked = tmp.path().join("locked");
    fs::create_dir_all(&locked).unwrap();
    fs::write(locked.join(".cvla.lock"), "").unwrap();
    let cfg = write_config(tmp.path());
    let out = cvla(&["synth", "--config", &cfg, "--out", s(&locked)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("locked"));
}

#[test]
fn full_pipeline_on_a_tiny_world() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let data = tmp.path().join("data");
    ok(&cvla(&["synth", "--config", &cfg, "--out", s(&data)]));

    let tailored = tmp.path().join("tailored");
    ok(&cvla(&["train", "--config", &cfg, "--data", s(&data), "--out", s(&tailored)]));
    let log = fs::read_to_string(tailored.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 4);
    let index: serde_json::Value =
        serde_json::from_slice(&fs::read(tailored.join("checkpoints.json")).unwrap()).unwrap();
    assert_eq!(index.as_array().unwrap().len(), 2);

    let gt = tmp.path().join("gt");
    let sel =
        ok(&cvla(&["train", "--config", &cfg, "--data", s(&data), "--out", s(&gt), "--source", "gt", "--steps", "2"]));
    assert!(sel.contains("\"source\": \"gt\""));
    let index: serde_json::Value = serde_json::from_slice(&fs::read(gt.join("checkpoints.json")).unwrap()).unwrap();
    assert_eq!(index.as_array().unwrap().len(), 1);

    let run = tmp.path().join("explain");
    ok(&cvla(&["explain", "--config", &cfg, "--model", s(&tailored), "--data", s(&data), "--out", s(&run)]));
    let idx: serde_json::Value = serde_json::from_slice(&fs::read(run.join("index.json")).unwrap()).unwrap();
    let entries = idx.as_array().unwrap();
    assert_eq!(entries.len(), 4);
    for e in entries {
        let panel = e["panel"].as_str().unwrap();
        assert!(run.join(panel).exists());
        if e["n_edits"] == 0 {
            assert!(e["note"].is_string());
        }
    }
    let metrics: serde_json::Value = serde_json::from_slice(&fs::read(run.join("metrics.json")).unwrap()).unwrap();
    let evaluated: serde_json::Value = serde_json::from_str(&ok(&cvla(&["evaluate", "--run", s(&run)]))).unwrap();
    assert_eq!(metrics["success"]["n_success"], evaluated["n_success"]);
    assert_eq!(metrics["success"]["n_manipulations"], evaluated["n_manipulations"]);

    let ablation = tmp.path().join("ablation");
    let rows: serde_json::Value = serde_json::from_str(&ok(&cvla(&[
        "ablate",
        "--config",
        &cfg,
        "--data",
        s(&data),
        "--tailored",
        s(&tailored),
        "--gt",
        s(&gt),
        "--out",
        s(&ablation),
    ])))
    .unwrap();
    let variants: Vec<&str> = rows.as_array().unwrap().iter().map(|r| r["variant"].as_str().unwrap()).collect();
    assert_eq!(variants, ["tailored-best", "tailored-late", "gt"]);

    let query = data.join("images/00000.pgm");
    let report: serde_json::Value =
        serde_json::from_str(&ok(&cvla(&["report", "--config", &cfg, "--image", s(&query)]))).unwrap();
    assert!(report["prompt"].as_str().unwrap().starts_with("The lung with the abnormalities of "));

    let other = data.join("images/00001.pgm");
    let sweep: serde_json::Value = serde_json::from_str(&ok(&cvla(&[
        "sweep-threshold",
        "--config",
        &cfg,
        "--query",
        s(&query),
        "--counterfactual",
        s(&other),
        "--levels",
        "0,50,255",
    ])))
    .unwrap();
    let areas: Vec<u64> = sweep.as_array().unwrap().iter().map(|r| r["mask_area"].as_u64().unwrap()).collect();
    assert_eq!(areas.len(), 3);
    assert!(areas[0] >= areas[1] && areas[1] >= areas[2]);
    assert_eq!(areas[2], 0);
}

#[test]
fn single_image_explain() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let data = tmp.path().join("data");
    ok(&cvla(&["synth", "--config", &cfg, "--out", s(&data)]));
    let model = tmp.path().join("model");
    ok(&cvla(&["train", "--config", &cfg, "--data", s(&data), "--out", s(&model), "--steps", "2"]));
    let run = tmp.path().join("one");
    let metrics: serde_json::Value = serde_json::from_str(&ok(&cvla(&[
        "explain",
        "--config",
        &cfg,
        "--model",
        s(&model),
        "--image",
        s(&data.join("images/00003.pgm")),
        "--out",
        s(&run),
    ])))
    .unwrap();
    assert_eq!(metrics["success"]["n_images"], 1);
    assert!(run.join("panels/00000.pgm").exists());
}
