mod common;

use std::path::Path;
use std::process::Command;

use sfae_core::models::ModelKind;

fn sfae(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_sfae")).args(args).env("RUST_LOG", "warn").output().unwrap();
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stdout).into_owned())
}

fn write_config(dir: &Path, cfg: &sfae::config::ExperimentConfig) -> String {
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_vec_pretty(cfg).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn run_report_and_verify() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let cfg = common::tiny_config(&[ModelKind::ImageAeMse], &[0], Path::new("ignored"));
    let config = write_config(tmp.path(), &cfg);
    let out_s = out.to_str().unwrap();

    let (code, stdout) = sfae(&["run", "--config", &config, "--output", out_s]);
    assert_eq!(code, 0, "{stdout}");
    assert!(stdout.contains("image_ae_mse"));
    assert_eq!(sfae(&["report", out_s]).0, 0);
    let (code, stdout) = sfae(&["verify", out_s]);
    assert_eq!(code, 0);
    assert!(stdout.contains("1 cells rerun, verified"), "{stdout}");

    std::fs::write(out.join("table.csv"), "method,config_hash\nx,0000\n").unwrap();
    assert_eq!(sfae(&["verify", out_s, "--rerun", "0"]).0, 1);
}

#[test]
fn configuration_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.json");
    assert_eq!(sfae(&["run", "--config", missing.to_str().unwrap()]).0, 2);

    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, r#"{"seeds": []}"#).unwrap();
    let out = tmp.path().join("o");
    assert_eq!(sfae(&["run", "--config", bad.to_str().unwrap(), "--output", out.to_str().unwrap()]).0, 2);

    std::fs::write(&bad, r#"{"unknown_field": 1}"#).unwrap();
    assert_eq!(sfae(&["ablation", "--config", bad.to_str().unwrap()]).0, 2);

    let cfg = common::tiny_config(&[ModelKind::ImageAeMse], &[0], &out);
    let config = write_config(tmp.path(), &cfg);
    assert_eq!(sfae(&["ablation", "--config", &config]).0, 2);
    assert_eq!(sfae(&["run", "--config", &config, "--workers", "0"]).0, 2);
    assert_eq!(sfae(&["verify", tmp.path().join("empty").to_str().unwrap()]).0, 2);
    assert_eq!(sfae(&["frobnicate"]).0, 2);
}
