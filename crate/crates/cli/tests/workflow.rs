use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sccam_core::data::DatasetSpec;

fn sccam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sccam"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_dataset(root: &Path) -> std::path::PathBuf {
    let spec = DatasetSpec {
        name: "tiny".into(),
        train_images: 16,
        eval_images: 4,
        image_size: 48,
        seed: 3,
        ..DatasetSpec::bench_v1()
    };
    let spec_path = root.join("spec.json");
    fs::write(&spec_path, serde_json::to_string(&spec).unwrap()).unwrap();
    let data = root.join("data");
    let out = sccam(&["generate", "--spec", s(&spec_path), "--out", s(&data)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    data
}

#[test]
fn generate_train_eval_cam_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_dataset(tmp.path());
    assert!(data.join("manifest.json").is_file());

    let runs = tmp.path().join("runs");
    let out = sccam(&[
        "train",
        "--dataset",
        s(&data),
        "--out",
        s(&runs),
        "--name",
        "r",
        "--rounds",
        "1",
        "--epochs",
        "1",
        "--k",
        "2",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let run = runs.join("r");
    for f in [
        "config.json",
        "log.csv",
        "round-0/checkpoint.json",
        "round-1/clusters.json",
    ] {
        assert!(run.join(f).is_file(), "missing {f}");
    }

    let ck = run.join("round-1/checkpoint.json");
    let ev = tmp.path().join("eval");
    let out = sccam(&[
        "eval",
        "--checkpoint",
        s(&ck),
        "--dataset",
        s(&data),
        "--out",
        s(&ev),
        "--export-masks",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ev.join("metrics.json")).unwrap()).unwrap();
    let miou = report["metrics"]["miou"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&miou));
    assert_eq!(fs::read_dir(ev.join("masks")).unwrap().count(), 4);

    let labels = fs::read_to_string(data.join("eval/labels.csv")).unwrap();
    let id = labels.lines().nth(1).unwrap().split(',').next().unwrap();
    let cams = tmp.path().join("cams");
    let out = sccam(&[
        "cam",
        "--checkpoint",
        s(&ck),
        "--dataset",
        s(&data),
        "--ids",
        id,
        "--out",
        s(&cams),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(cams.join(format!("{id}_mask.png")).is_file());

    let out = sccam(&[
        "cam",
        "--checkpoint",
        s(&ck),
        "--dataset",
        s(&data),
        "--ids",
        "nope",
        "--out",
        s(&cams),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn usage_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&sccam(&["train", "--bogus"])), 1);
    assert_eq!(code(&sccam(&["train", "--k", "2"])), 1);

    let cfg = tmp.path().join("bad.json");
    fs::write(&cfg, r#"{"train": {"lamda": 1.0}}"#).unwrap();
    let out = sccam(&["train", "--config", s(&cfg), "--dataset", "d", "--out", "o"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("lamda"));

    let occupied = tmp.path().join("occupied");
    fs::create_dir_all(&occupied).unwrap();
    fs::write(occupied.join("x"), "x").unwrap();
    assert_eq!(code(&sccam(&["generate", "--out", s(&occupied)])), 1);
}

#[test]
fn missing_dataset_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = sccam(&[
        "train",
        "--dataset",
        s(&tmp.path().join("absent")),
        "--out",
        s(&tmp.path().join("runs")),
    ]);
    assert_eq!(code(&out), 2);
}
