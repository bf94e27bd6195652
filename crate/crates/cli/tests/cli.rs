use std::path::Path;
use std::process::{Command, Output};

fn conal(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_conal")).args(args).current_dir(cwd).output().unwrap()
}

fn write_config(dir: &Path, extra: &str) -> String {
    let text = format!(
        r#"{{"dataset": {{"num_instances": 300}},
            "train": {{"epochs": 3, "batch_size": 64, "hidden": 16, "seeds": [2],
                      "em": {{"max_iters": 4, "classifier_steps": 2}}}}{extra}}}"#
    );
    let path = dir.join("config.json");
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

fn error_kind(out: &Output) -> String {
    let v: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    v["error"]["kind"].as_str().unwrap().to_string()
}

#[test]
fn generate_then_train_then_analyze() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = write_config(dir, "");
    let out = conal(&["generate", "--config", &cfg, "--out", "data"], dir);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.join("data/train_annotations.csv").exists());
    assert!(dir.join("data/world/world.json").exists());

    let out = conal(&["train", "--config", &cfg, "--data", "data", "--method", "dl_mv", "--out", "mv"], dir);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join("mv/report.json")).unwrap()).unwrap();
    assert_eq!(report["method"], "dl_mv");
    assert_eq!(report["seed"], 2);
    let curves = std::fs::read_to_string(dir.join("mv/curves.csv")).unwrap();
    assert_eq!(curves.lines().count(), 1 + 4);

    let out = conal(&["train", "--config", &cfg, "--data", "data", "--method", "conal", "--out", "cn"], dir);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = conal(&["analyze", "--config", &cfg, "--data", "data", "--learned", "cn", "--out", "an"], dir);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["heatmap.csv", "recovery.csv", "omega_learned.csv", "omega_planted.csv", "manifest.json"] {
        assert!(dir.join("an").join(f).exists(), "{f}");
    }
}

#[test]
fn em_and_bound_write_their_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = write_config(dir, "");
    let out = conal(&["em", "--config", &cfg, "--out", "em"], dir);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ll = std::fs::read_to_string(dir.join("em/log_likelihood.csv")).unwrap();
    let values: Vec<f64> = ll.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert!(values.windows(2).all(|w| w[1] >= w[0] - 1e-9));

    let out = conal(&["bound", "--config", &cfg, "--out", "bd"], dir);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join("bd/bound.json")).unwrap()).unwrap();
    assert_eq!(report["num_classes"], 6);
}

#[test]
fn sweep_is_reproducible_and_reportable() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let sweep = r#", "sweep": {"common_strength": [0.4, 0.7], "proportion": [0.0, 0.5], "lambda": [1e-5], "methods": ["dl_mv", "dl_cl"]}"#;
    let cfg = write_config(dir, sweep);
    for (out_dir, jobs) in [("a", "1"), ("b", "2")] {
        let out = conal(&["sweep", "--config", &cfg, "--jobs", jobs, "--out", out_dir], dir);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let a = std::fs::read_to_string(dir.join("a/summary.csv")).unwrap();
    assert_eq!(a.lines().count(), 1 + 2 * 2 * 2);
    assert_eq!(a, std::fs::read_to_string(dir.join("b/summary.csv")).unwrap());
    let out = conal(&["report", "--out", "a"], dir);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("| 0.7 | 0.5 |"));
}

#[test]
fn errors_are_reported_as_json() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let out = conal(&["train", "--method", "svm", "--out", "x"], dir);
    assert!(!out.status.success());
    assert_eq!(error_kind(&out), "unknown_method");

    std::fs::write(dir.join("bad.json"), r#"{"trian": {}}"#).unwrap();
    let out = conal(&["generate", "--config", "bad.json"], dir);
    assert!(!out.status.success());
    assert_eq!(error_kind(&out), "parse");

    let out = conal(&["analyze", "--data", "missing"], dir);
    assert!(!out.status.success());
    assert_eq!(error_kind(&out), "io");
}
