//! End-to-end tests of the command-line binary: exit codes, artifact
//! layout, and byte-for-byte reproducibility of reruns.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fuseguard"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn fuseguard")
}

fn assert_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

#[test]
fn usage_errors_exit_with_code_two() {
    let out = run(&["evaluate", "--data", "somewhere"]);
    assert_eq!(out.status.code(), Some(2), "missing required arguments");

    let out = run(&["generate", "--out", "d", "--frobnicate"]);
    assert_eq!(out.status.code(), Some(2), "unknown flag");

    let out = run(&["no-such-command"]);
    assert_eq!(out.status.code(), Some(2), "unknown subcommand");

    let out = run(&[
        "evaluate", "--data", "d", "--ckpt", "c", "--out", "o", "--mode", "pgd", "--levels",
        "0.2,0.1",
    ]);
    assert_eq!(out.status.code(), Some(2), "unordered levels");
}

#[test]
fn runtime_failures_exit_with_code_one_and_name_the_path() {
    let out = run(&["train", "--data", "/nonexistent/data", "--out", "/tmp/unused"]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.starts_with("error: "), "diagnostic prefix, got {stderr:?}");
    assert!(stderr.contains("/nonexistent/data"), "path in message, got {stderr:?}");
}

#[test]
fn the_pipeline_produces_stable_artifacts_and_reruns_byte_identically() {
    let dir = tempfile::tempdir().expect("tempdir");
    let root = dir.path();
    let data = root.join("data");
    let ckpt = root.join("ckpt");
    let detector = root.join("detector.json");
    let s = |p: &Path| p.to_str().unwrap().to_owned();

    let out = run(&[
        "generate",
        "--out",
        &s(&data),
        "--classes",
        "3",
        "--train-per-class",
        "6",
        "--test-per-class",
        "4",
        "--image-size",
        "16",
    ]);
    assert_ok(&out, "generate");
    assert!(data.join("meta.json").is_file());
    assert!(data.join("labels.csv").is_file());

    let out = run(&[
        "train",
        "--data",
        &s(&data),
        "--out",
        &s(&ckpt),
        "--epochs",
        "3",
    ]);
    assert_ok(&out, "train");
    assert!(ckpt.join("arch.json").is_file());
    let train_meta: serde_json::Value =
        serde_json::from_slice(&read(&ckpt.join("train_meta.json"))).expect("train meta json");
    assert_eq!(train_meta["seed"], 0, "default seed echoed");
    assert_eq!(train_meta["config"]["epochs"], 3);

    let out = run(&[
        "calibrate",
        "--data",
        &s(&data),
        "--ckpt",
        &s(&ckpt),
        "--out",
        &s(&detector),
        "--split",
        "heldout",
    ]);
    assert_ok(&out, "calibrate");
    let cal_meta: serde_json::Value =
        serde_json::from_slice(&read(&root.join("detector.json.meta.json"))).expect("sidecar");
    assert_eq!(cal_meta["config"]["split"], "heldout");
    assert!(cal_meta["beta"].is_number());

    // Adaptive modes refuse to run blind.
    let out = run(&[
        "attack", "--data", &s(&data), "--ckpt", &s(&ckpt), "--out", "/tmp/unused.json",
        "--mode", "adaptive-pgd", "--eps", "0.1",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--detector"));

    // Patch modes insist on a patch side.
    let out = run(&[
        "attack", "--data", &s(&data), "--ckpt", &s(&ckpt), "--out", "/tmp/unused.json",
        "--mode", "patch", "--eps", "1.0",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--patch-side"));

    let attack_args = [
        "attack",
        "--data",
        &s(&data),
        "--ckpt",
        &s(&ckpt),
        "--detector",
        &s(&detector),
        "--out",
        "",
        "--mode",
        "patch",
        "--eps",
        "1.0",
        "--steps",
        "4",
        "--patch-side",
        "5",
        "--placement",
        "random-translation",
        "--limit",
        "4",
        "--seed",
        "3",
    ];
    let attack_out = |path: &Path| {
        let mut args: Vec<&str> = attack_args.to_vec();
        let p = s(path);
        args[8] = &p;
        let out = run(&args);
        assert_ok(&out, "attack");
        read(path)
    };
    let first = attack_out(&root.join("attack_a.json"));
    let second = attack_out(&root.join("attack_b.json"));
    assert_eq!(first, second, "attack rerun drifted");
    let report: serde_json::Value = serde_json::from_slice(&first).expect("attack json");
    assert_eq!(report["config"]["seed"], 3);
    assert_eq!(report["summary"]["n"], 4);
    assert_eq!(report["results"].as_array().expect("results").len(), 4);
    assert!(
        report["results"][0]["rejected"].is_boolean(),
        "detector verdict recorded"
    );

    let curve_args = |out_path: &str| {
        vec![
            "evaluate".to_owned(),
            "--data".to_owned(),
            s(&data),
            "--ckpt".to_owned(),
            s(&ckpt),
            "--detector".to_owned(),
            s(&detector),
            "--out".to_owned(),
            out_path.to_owned(),
            "--mode".to_owned(),
            "pgd".to_owned(),
            "--levels".to_owned(),
            "0,0.1".to_owned(),
            "--steps".to_owned(),
            "4".to_owned(),
            "--limit".to_owned(),
            "6".to_owned(),
        ]
    };
    let curve_a = root.join("curve_a.csv");
    let curve_b = root.join("curve_b.csv");
    let out = bin().args(curve_args(&s(&curve_a))).output().expect("spawn");
    assert_ok(&out, "evaluate");
    let out = bin().args(curve_args(&s(&curve_b))).output().expect("spawn");
    assert_ok(&out, "evaluate rerun");
    assert_eq!(read(&curve_a), read(&curve_b), "curve rerun drifted");
    let text = String::from_utf8(read(&curve_a)).expect("utf8 csv");
    assert!(text.starts_with("level,acc_undef,acc_def,rej_rate,n\n"));
    assert_eq!(text.lines().count(), 3, "header plus one row per level");
    let sidecar: serde_json::Value =
        serde_json::from_slice(&read(&root.join("curve_a.csv.meta.json"))).expect("sidecar");
    assert_eq!(sidecar["config"]["spec"]["mode"], "pgd");
    assert_eq!(sidecar["defended"], true);

    let heat_a = root.join("heat_a.csv");
    let heat_b = root.join("heat_b.csv");
    for heat in [&heat_a, &heat_b] {
        let out = run(&[
            "cka", "--data", &s(&data), "--ckpt", &s(&ckpt), "--out", &s(heat), "--stream",
            "rgb", "--limit", "8",
        ]);
        assert_ok(&out, "cka");
    }
    assert_eq!(read(&heat_a), read(&heat_b), "heatmap rerun drifted");
    let heat_meta: serde_json::Value =
        serde_json::from_slice(&read(&root.join("heat_a.csv.meta.json"))).expect("sidecar");
    assert!(heat_meta["redundancy"].is_number());
    assert_eq!(heat_meta["samples"], 8);
}

#[test]
fn different_seeds_render_different_datasets() {
    let dir = tempfile::tempdir().expect("tempdir");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for (path, seed) in [(&a, "0"), (&b, "1")] {
        let out = run(&[
            "generate",
            "--out",
            path.to_str().unwrap(),
            "--classes",
            "3",
            "--train-per-class",
            "2",
            "--test-per-class",
            "1",
            "--image-size",
            "16",
            "--seed",
            seed,
        ]);
        assert_ok(&out, "generate");
    }
    let sample = Path::new("samples").join("train_0000_rgb.fgt");
    assert_ne!(
        read(&a.join(&sample)),
        read(&b.join(&sample)),
        "seed had no effect on rendered pixels"
    );
}
